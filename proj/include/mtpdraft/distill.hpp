// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/sampling.hpp"
#include "mtpdraft/tokenizer.hpp"
#include "mtpdraft/training.hpp"

namespace mtpdraft {

struct Prompt {
  TokenSequence tokens;
  std::string lang;
  std::string source;
};

struct GenerationConfig {
  SamplingConfig sampling;
  std::size_t max_new_tokens = 48;
  std::uint64_t seed = 0;
  bool stop_at_eos = true;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Samples one continuation. Each prompt gets its own stream seeded from
// (seed, index), so results do not depend on processing order.
inline TrainingExample distill_one(const MainModel& main, const Prompt& p, const GenerationConfig& cfg,
                                   std::size_t index) {
  if (p.tokens.empty()) throw DimensionError("self_distill: empty prompt");
  if (p.tokens.size() + cfg.max_new_tokens > main.config.max_seq_len) {
    throw CapacityError("self_distill: prompt length + max_new_tokens exceeds max_seq_len");
  }
  std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(index)));
  TrainingExample ex{p.tokens, {}, p.lang, p.source, false};
  if (cfg.max_new_tokens == 0) return ex;
  KVCache cache = KVCache::for_main(main.config);
  MainOutput o = main_forward(main, p.tokens, cache, true);
  while (true) {
    const TokenId t = sample_token(o.logits.row(o.logits.rows() - 1), cfg.sampling, rng);
    ex.response.push_back(t);
    if (cfg.stop_at_eos && t == kEosToken) break;
    if (ex.response.size() == cfg.max_new_tokens) {
      ex.truncated = true;
      break;
    }
    const TokenId one[] = {t};
    o = main_forward(main, one, cache);
  }
  return ex;
}

inline std::vector<TrainingExample> self_distill(std::span<const Prompt> prompts, const MainModel& main,
                                                 const GenerationConfig& cfg) {
  cfg.sampling.validate();
  std::vector<TrainingExample> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) out.push_back(distill_one(main, prompts[i], cfg, i));
  return out;
}

// exp of the mean next-token cross entropy over the response tokens.
inline double response_perplexity(const MainModel& main, std::span<const TokenId> prompt,
                                  std::span<const TokenId> response) {
  if (prompt.empty() || response.empty()) throw DimensionError("response_perplexity: empty prompt or response");
  TokenSequence seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), response.begin(), response.end());
  KVCache cache = KVCache::for_main(main.config);
  MainOutput o = main_forward(main, std::span<const TokenId>(seq.data(), seq.size() - 1), cache);
  double nll = 0.0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    nll += softmax_cross_entropy(o.logits.row(prompt.size() - 1 + i), response[i]).loss;
  }
  return std::exp(nll / static_cast<double>(response.size()));
}

// ---------------------------------------------------------------------------
// De-duplication and heuristic filtering.

struct DedupConfig {
  double jaccard_threshold = 0.8;
  std::size_t shingle_width = 3;
  std::size_t num_hashes = 64;
  std::uint64_t seed = 0x5eed;
  std::size_t min_response_length = 1;
  std::size_t max_response_length = std::numeric_limits<std::size_t>::max();
  std::size_t repetition_ngram = 4;
  double repetition_bound = 0.5;  // max share of the response covered by one repeated n-gram
  bool drop_truncated = false;

  void validate() const {
    if (!(jaccard_threshold > 0.0 && jaccard_threshold <= 1.0)) {
      throw ConfigError("dedup: jaccard_threshold must lie in (0, 1]");
    }
    if (shingle_width < 1 || num_hashes < 1 || repetition_ngram < 1) {
      throw ConfigError("dedup: shingle width, hash count and n-gram size must be >= 1");
    }
    if (min_response_length > max_response_length) throw ConfigError("dedup: empty length range");
  }
};

struct DedupReport {
  std::vector<TrainingExample> kept;
  std::size_t duplicates = 0;
  std::size_t out_of_length = 0;
  std::size_t repetitive = 0;
  std::size_t truncated = 0;
};

inline std::vector<std::uint64_t> minhash_signature(std::span<const TokenId> tokens, std::size_t width,
                                                    std::size_t num_hashes, std::uint64_t seed) {
  std::vector<std::uint64_t> shingles;
  const std::size_t w = std::min(width, tokens.size());
  for (std::size_t i = 0; i + w <= tokens.size() && w > 0; ++i) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t j = 0; j < w; ++j) h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(tokens[i + j])));
    shingles.push_back(h);
  }
  std::vector<std::uint64_t> sig(num_hashes, std::numeric_limits<std::uint64_t>::max());
  for (std::size_t k = 0; k < num_hashes; ++k) {
    const std::uint64_t salt = splitmix64(seed + k);
    for (std::uint64_t s : shingles) sig[k] = std::min(sig[k], splitmix64(s ^ salt));
  }
  return sig;
}

inline double estimated_jaccard(std::span<const std::uint64_t> a, std::span<const std::uint64_t> b) {
  require(a.size() == b.size() && !a.empty(), "estimated_jaccard: signature length mismatch");
  std::size_t eq = 0;
  for (std::size_t i = 0; i < a.size(); ++i) eq += a[i] == b[i] ? 1 : 0;
  return static_cast<double>(eq) / static_cast<double>(a.size());
}

// Share of the sequence covered by its most frequent n-gram:
// min(1, count * n / length). Zero unless some n-gram occurs twice.
inline double repetition_ratio(std::span<const TokenId> tokens, std::size_t n) {
  if (tokens.size() < n || n == 0) return 0.0;
  std::map<std::vector<TokenId>, std::size_t> counts;
  std::size_t best = 0;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    best = std::max(best, ++counts[std::vector<TokenId>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                                         tokens.begin() + static_cast<std::ptrdiff_t>(i + n))]);
  }
  if (best < 2) return 0.0;
  return std::min(1.0, static_cast<double>(best * n) / static_cast<double>(tokens.size()));
}

// MinHash over the whole example (prompt + response); any pair whose
// estimated Jaccard reaches the threshold keeps only the earlier example.
// Survivors then pass the length, repetition and truncation rules.
inline DedupReport dedup_and_filter(std::span<const TrainingExample> dataset, const DedupConfig& cfg) {
  cfg.validate();
  DedupReport rep;
  std::vector<std::vector<std::uint64_t>> kept_sigs;
  std::vector<const TrainingExample*> unique;
  for (const auto& ex : dataset) {
    auto sig = minhash_signature(ex.sequence(), cfg.shingle_width, cfg.num_hashes, cfg.seed);
    bool dup = false;
    for (const auto& other : kept_sigs) {
      if (estimated_jaccard(sig, other) >= cfg.jaccard_threshold) {
        dup = true;
        break;
      }
    }
    if (dup) {
      ++rep.duplicates;
      continue;
    }
    kept_sigs.push_back(std::move(sig));
    unique.push_back(&ex);
  }
  for (const TrainingExample* ex : unique) {
    if (ex->response.size() < cfg.min_response_length || ex->response.size() > cfg.max_response_length) {
      ++rep.out_of_length;
    } else if (repetition_ratio(ex->response, cfg.repetition_ngram) > cfg.repetition_bound) {
      ++rep.repetitive;
    } else if (cfg.drop_truncated && ex->truncated) {
      ++rep.truncated;
    } else {
      rep.kept.push_back(*ex);
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSON-lines dataset files.

inline nlohmann::json example_json(const TrainingExample& ex) {
  return {{"prompt", ex.prompt}, {"response", ex.response}, {"lang", ex.lang}, {"source", ex.source},
          {"truncated", ex.truncated}};
}

inline TrainingExample example_from_json(const nlohmann::json& j) {
  TrainingExample ex;
  ex.prompt = j.at("prompt").get<TokenSequence>();
  ex.response = j.at("response").get<TokenSequence>();
  ex.lang = j.at("lang").get<std::string>();
  ex.source = j.value("source", std::string{});
  ex.truncated = j.value("truncated", false);
  return ex;
}

inline void write_dataset(const std::filesystem::path& path, std::span<const TrainingExample> data) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& ex : data) os << example_json(ex).dump() << "\n";
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::vector<TrainingExample> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<TrainingExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mtpdraft
