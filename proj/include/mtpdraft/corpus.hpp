// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Desk corpora: Zipf-weighted Markov "languages" over the synthetic symbol
// range, deterministic period-p cycles, and byte-level text files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mtpdraft/error.hpp"
#include "mtpdraft/sampling.hpp"
#include "mtpdraft/tensor.hpp"
#include "mtpdraft/tokenizer.hpp"

namespace mtpdraft {

struct Document {
  TokenSequence tokens;
  std::string lang;
  std::string source;
};

// P(rank r) proportional to 1 / (r + 1)^s, r = 0..n-1.
class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double exponent) : cdf_(n) {
    if (n == 0) throw ConfigError("zipf: support must be nonempty");
    double acc = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), exponent);
      cdf_[r] = acc;
    }
    for (double& c : cdf_) c /= acc;
  }

  std::size_t size() const { return cdf_.size(); }

  double probability(std::size_t r) const { return r == 0 ? cdf_[0] : cdf_[r] - cdf_[r - 1]; }

  std::size_t sample(std::mt19937_64& rng) const {
    const double u = uniform01(rng);
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    return it == cdf_.end() ? cdf_.size() - 1 : static_cast<std::size_t>(it - cdf_.begin());
  }

 private:
  std::vector<double> cdf_;
};

// iid Zipf tokens over ids [first, first + n).
inline TokenSequence zipf_tokens(std::size_t count, std::size_t n, TokenId first, double exponent,
                                 std::mt19937_64& rng) {
  ZipfSampler z(n, exponent);
  TokenSequence out(count);
  for (auto& t : out) t = first + static_cast<TokenId>(z.sample(rng));
  return out;
}

struct SyntheticLanguageConfig {
  std::string tag = "syn-a";
  std::size_t vocab_size = 512;
  std::uint64_t seed = 1;
  std::size_t successors = 4;
  double successor_decay = 0.4;  // weight of successor j is decay^j
  double restart = 0.25;         // probability of an unconditioned Zipf draw
  double zipf_exponent = 1.0;
  std::size_t context_classes = 1;  // >1: successors also depend on the class of the previous symbol
  std::size_t modes = 1;            // document-level latent modes, each with its own successor tables
};

// Markov source over the synthetic symbols. With context_classes = c > 1
// each symbol has c successor lists and the list is picked by a hashed class
// of the symbol before it, so the next token depends on the last two. With
// modes = m > 1 every document draws a hidden mode up front and all its
// transitions use that mode's tables. Each language ranks the synthetic symbols by its
// own permutation, so two languages share the id range but have disjoint
// high-frequency sets. Marginals stay long-tailed because both the restart
// draw and every successor list are Zipf over the language's ranking.
class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(SyntheticLanguageConfig cfg) : cfg_(std::move(cfg)), zipf_(1, 1.0) {
    if (cfg_.vocab_size <= static_cast<std::size_t>(kFirstSyntheticToken) + 1) {
      throw ConfigError("synthetic language: vocab_size leaves no synthetic symbols");
    }
    if (cfg_.successors < 1) throw ConfigError("synthetic language: successors must be >= 1");
    if (cfg_.context_classes < 1) throw ConfigError("synthetic language: context_classes must be >= 1");
    if (cfg_.modes < 1) throw ConfigError("synthetic language: modes must be >= 1");
    if (!(cfg_.restart >= 0.0 && cfg_.restart <= 1.0)) throw ConfigError("synthetic language: restart in [0,1]");
    const std::size_t n = cfg_.vocab_size - kFirstSyntheticToken;
    zipf_ = ZipfSampler(n, cfg_.zipf_exponent);
    std::mt19937_64 rng(cfg_.seed);
    ranking_.resize(n);
    std::iota(ranking_.begin(), ranking_.end(), kFirstSyntheticToken);
    for (std::size_t i = n; i > 1; --i) std::swap(ranking_[i - 1], ranking_[uniform_index(rng, i)]);

    const std::size_t m = std::min(cfg_.successors, n);
    for (std::size_t j = 0; j < m; ++j) weights_.push_back(std::pow(cfg_.successor_decay, static_cast<double>(j)));
    successors_.resize(n * cfg_.context_classes * cfg_.modes);
    for (auto& row : successors_) {
      while (row.size() < m) {
        const TokenId t = ranking_[zipf_.sample(rng)];
        if (std::find(row.begin(), row.end(), t) == row.end()) row.push_back(t);
      }
    }
  }

  const std::string& tag() const { return cfg_.tag; }
  const SyntheticLanguageConfig& config() const { return cfg_; }
  std::span<const TokenId> ranking() const { return ranking_; }
  std::span<const TokenId> successors(TokenId t, TokenId before = -1, std::size_t mode = 0) const {
    if (mode >= cfg_.modes) throw IndexError("synthetic language: mode out of range");
    return successors_.at(row(t, before, mode));
  }
  std::size_t context_class(TokenId t) const {
    if (cfg_.context_classes == 1 || t < 0) return 0;
    return static_cast<std::size_t>((static_cast<std::uint64_t>(t) * 0x9e3779b97f4a7c15ULL ^ cfg_.seed) >> 40) %
           cfg_.context_classes;
  }

  TokenSequence generate(std::size_t length, std::mt19937_64& rng) const {
    TokenSequence out;
    out.reserve(length);
    if (length == 0) return out;
    const std::size_t mode = cfg_.modes > 1 ? uniform_index(rng, cfg_.modes) : 0;
    out.push_back(ranking_[zipf_.sample(rng)]);
    while (out.size() < length) {
      if (uniform01(rng) < cfg_.restart) {
        out.push_back(ranking_[zipf_.sample(rng)]);
      } else {
        const TokenId before = out.size() >= 2 ? out[out.size() - 2] : -1;
        const auto& succ = successors_[row(out.back(), before, mode)];
        out.push_back(succ[sample_weighted(weights_, rng)]);
      }
    }
    return out;
  }

 private:
  std::size_t index(TokenId t) const {
    if (t < kFirstSyntheticToken || static_cast<std::size_t>(t) >= cfg_.vocab_size) {
      throw IndexError("synthetic language: token " + std::to_string(t) + " is not a synthetic symbol");
    }
    return static_cast<std::size_t>(t - kFirstSyntheticToken);
  }
  std::size_t row(TokenId t, TokenId before, std::size_t mode) const {
    return (mode * cfg_.context_classes + context_class(before)) * ranking_.size() + index(t);
  }

  SyntheticLanguageConfig cfg_;
  ZipfSampler zipf_;
  std::vector<TokenId> ranking_;
  std::vector<double> weights_;
  std::vector<std::vector<TokenId>> successors_;
};

struct PeriodicLanguageConfig {
  std::string tag = "period4";
  std::size_t vocab_size = 16;
  std::size_t period = 4;
  std::size_t cycles = 3;
  std::uint64_t seed = 4;
};

// Disjoint deterministic cycles over ids starting at kByteOffset. The next
// token is a function of the current one, so the continuation of any prompt
// is known in closed form.
class PeriodicLanguage {
 public:
  explicit PeriodicLanguage(PeriodicLanguageConfig cfg) : cfg_(std::move(cfg)) {
    const std::size_t need = cfg_.period * cfg_.cycles;
    if (cfg_.period < 1 || cfg_.cycles < 1) throw ConfigError("periodic language: period and cycles must be >= 1");
    if (static_cast<std::size_t>(kByteOffset) + need > cfg_.vocab_size) {
      throw ConfigError("periodic language: vocab_size too small for the requested cycles");
    }
    std::vector<TokenId> ids(need);
    std::iota(ids.begin(), ids.end(), kByteOffset);
    std::mt19937_64 rng(cfg_.seed);
    for (std::size_t i = need; i > 1; --i) std::swap(ids[i - 1], ids[uniform_index(rng, i)]);
    next_.assign(cfg_.vocab_size, -1);
    for (std::size_t c = 0; c < cfg_.cycles; ++c) {
      for (std::size_t j = 0; j < cfg_.period; ++j) {
        next_[static_cast<std::size_t>(ids[c * cfg_.period + j])] = ids[c * cfg_.period + (j + 1) % cfg_.period];
      }
      starts_.push_back(ids[c * cfg_.period]);
    }
  }

  const std::string& tag() const { return cfg_.tag; }
  const PeriodicLanguageConfig& config() const { return cfg_; }

  TokenId next(TokenId t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= next_.size() || next_[static_cast<std::size_t>(t)] < 0) {
      throw IndexError("periodic language: token " + std::to_string(t) + " is on no cycle");
    }
    return next_[static_cast<std::size_t>(t)];
  }

  // The analytic continuation of `prefix`, `length` tokens long.
  TokenSequence continuation(std::span<const TokenId> prefix, std::size_t length) const {
    if (prefix.empty()) throw DimensionError("periodic language: empty prefix");
    TokenSequence out;
    TokenId t = prefix.back();
    for (std::size_t i = 0; i < length; ++i) out.push_back(t = next(t));
    return out;
  }

  TokenSequence generate(std::size_t length, std::mt19937_64& rng) const {
    TokenId t = starts_[uniform_index(rng, starts_.size())];
    for (std::size_t skip = uniform_index(rng, cfg_.period); skip > 0; --skip) t = next(t);
    TokenSequence out;
    for (std::size_t i = 0; i < length; ++i, t = next(t)) out.push_back(t);
    return out;
  }

 private:
  PeriodicLanguageConfig cfg_;
  std::vector<TokenId> next_;
  std::vector<TokenId> starts_;
};

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Splits text into non-empty lines, encodes bytes, and cuts each line into
// windows of at most `window` tokens. Windows shorter than `min_len` are
// dropped.
inline std::vector<Document> text_documents(const std::string& text, const std::string& lang,
                                            const std::string& source, std::size_t window, std::size_t min_len) {
  if (window == 0) throw ConfigError("text_documents: window must be >= 1");
  std::vector<Document> docs;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    TokenSequence toks = encode_bytes(line);
    for (std::size_t off = 0; off < toks.size(); off += window) {
      const std::size_t n = std::min(window, toks.size() - off);
      if (n < min_len) continue;
      docs.push_back({TokenSequence(toks.begin() + static_cast<std::ptrdiff_t>(off),
                                    toks.begin() + static_cast<std::ptrdiff_t>(off + n)),
                      lang, source});
    }
  }
  return docs;
}

// Picks a window of `length` tokens from a random document, starting at a
// position that does not split a UTF-8 sequence.
inline TokenSequence text_prompt(const std::vector<Document>& docs, std::size_t length, std::mt19937_64& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const Document& d = docs[uniform_index(rng, docs.size())];
    if (d.tokens.size() < length) continue;
    std::size_t start = uniform_index(rng, d.tokens.size() - length + 1);
    while (start > 0 && is_byte_token(d.tokens[start]) && (token_byte(d.tokens[start]) & 0xC0u) == 0x80u) --start;
    return TokenSequence(d.tokens.begin() + static_cast<std::ptrdiff_t>(start),
                         d.tokens.begin() + static_cast<std::ptrdiff_t>(start + length));
  }
  throw ConfigError("text_prompt: no document is long enough for the requested prompt length");
}

}  // namespace mtpdraft
