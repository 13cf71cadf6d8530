// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/tensor.hpp"
#include "mtpdraft/tokenizer.hpp"

namespace mtpdraft {

// ---------------------------------------------------------------------------
// Frequency statistics.

struct FrequencyTable {
  std::string lang;
  std::map<TokenId, std::uint64_t> counts;
  std::uint64_t total = 0;

  std::uint64_t count(TokenId t) const {
    auto it = counts.find(t);
    return it == counts.end() ? 0 : it->second;
  }

  // (id, count) by count descending, then id ascending.
  std::vector<std::pair<TokenId, std::uint64_t>> ranked() const {
    std::vector<std::pair<TokenId, std::uint64_t>> r(counts.begin(), counts.end());
    std::stable_sort(r.begin(), r.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return r;
  }

  FrequencyTable& operator+=(const FrequencyTable& o) {
    for (const auto& [t, c] : o.counts) counts[t] += c;
    total += o.total;
    return *this;
  }

  bool operator==(const FrequencyTable&) const = default;
};

inline FrequencyTable build_frequency_table(std::span<const TokenSequence> corpus, const std::string& lang) {
  FrequencyTable t;
  t.lang = lang;
  for (const auto& seq : corpus) {
    for (TokenId id : seq) {
      if (id < 0) throw IndexError("build_frequency_table: negative token id");
      ++t.counts[id];
      ++t.total;
    }
  }
  if (t.total == 0) throw EmptyTableError("build_frequency_table: corpus for '" + lang + "' has no tokens");
  return t;
}

// Fraction of the table's occurrences covered by `keep`.
inline double coverage(const FrequencyTable& table, std::span<const TokenId> keep) {
  if (table.total == 0) return 0.0;
  std::uint64_t c = 0;
  for (TokenId t : keep) c += table.count(t);
  return static_cast<double>(c) / static_cast<double>(table.total);
}

// Smallest prefix of the ranking whose coverage reaches `target`.
inline std::size_t size_for_coverage(const FrequencyTable& table, double target) {
  std::uint64_t c = 0;
  std::size_t n = 0;
  for (const auto& [t, cnt] : table.ranked()) {
    if (static_cast<double>(c) >= target * static_cast<double>(table.total)) break;
    c += cnt;
    ++n;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Compressed vocabulary.

struct OpCounter {
  std::uint64_t multiplies = 0;
};

// A sorted keep-list plus a materialized copy of the matching rows of the
// output head. The copy is checked against its source on every use, so an
// edited head is reported instead of silently producing stale drafts.
class CompressedVocab {
 public:
  CompressedVocab() = default;
  CompressedVocab(std::string lang, std::vector<TokenId> keep, std::size_t full_size)
      : lang_(std::move(lang)), keep_(std::move(keep)), full_size_(full_size), index_(full_size, -1) {
    if (!std::is_sorted(keep_.begin(), keep_.end()) ||
        std::adjacent_find(keep_.begin(), keep_.end()) != keep_.end()) {
      throw ConfigError("compressed vocab: keep list must be sorted and duplicate-free");
    }
    for (std::size_t i = 0; i < keep_.size(); ++i) {
      if (keep_[i] < 0 || static_cast<std::size_t>(keep_[i]) >= full_size_) {
        throw IndexError("compressed vocab: token " + std::to_string(keep_[i]) + " outside the vocabulary");
      }
      index_[static_cast<std::size_t>(keep_[i])] = static_cast<std::int32_t>(i);
    }
  }

  const std::string& lang() const { return lang_; }
  std::span<const TokenId> keep() const { return keep_; }
  std::size_t size() const { return keep_.size(); }
  std::size_t full_size() const { return full_size_; }
  bool contains(TokenId t) const { return compressed_index(t) >= 0; }
  bool is_identity() const { return keep_.size() == full_size_; }

  // Position of `t` in the keep list, or -1.
  std::int32_t compressed_index(TokenId t) const {
    if (t < 0 || static_cast<std::size_t>(t) >= full_size_) return -1;
    return index_[static_cast<std::size_t>(t)];
  }
  TokenId full_id(std::size_t i) const { return keep_.at(i); }

  // Extracts W~ = W[keep, :]. `w` must outlive this object.
  void attach(const Tensor& w) {
    if (w.rank() != 2 || w.rows() != full_size_) {
      throw DimensionError("compressed vocab: head has " + std::to_string(w.rows()) + " rows, expected " +
                           std::to_string(full_size_));
    }
    source_ = &w;
    dim_ = w.cols();
    rows_ = Tensor({keep_.size(), dim_});
    for (std::size_t i = 0; i < keep_.size(); ++i) {
      std::copy_n(w.ptr() + static_cast<std::size_t>(keep_[i]) * dim_, dim_, rows_.ptr() + i * dim_);
    }
  }

  bool attached() const { return source_ != nullptr; }
  const Tensor& rows() const { return rows_; }
  const Tensor* source() const { return source_; }

  // Throws ConsistencyError unless every W~ row equals its source row bit for bit.
  void validate() const {
    if (!source_) throw StateError("compressed vocab: not attached to an output head");
    if (source_->rows() != full_size_ || source_->cols() != dim_) {
      throw ConsistencyError("compressed vocab: output head shape changed");
    }
    for (std::size_t i = 0; i < keep_.size(); ++i) {
      if (std::memcmp(rows_.ptr() + i * dim_, source_->ptr() + static_cast<std::size_t>(keep_[i]) * dim_,
                      dim_ * sizeof(double)) != 0) {
        throw ConsistencyError("compressed vocab: row for token " + std::to_string(keep_[i]) +
                               " differs from the output head");
      }
    }
  }

 private:
  std::string lang_;
  std::vector<TokenId> keep_;
  std::size_t full_size_ = 0;
  std::vector<std::int32_t> index_;
  const Tensor* source_ = nullptr;
  std::size_t dim_ = 0;
  Tensor rows_;
};

// Top `size` ids by count (ties to the lower id), then specials forced in by
// displacing the lowest-ranked members. Zero-count ids fill any remaining
// slots in id order so that size == |V| is always the identity.
inline CompressedVocab compress_vocab(const FrequencyTable& table, std::size_t size,
                                      std::span<const TokenId> specials, std::size_t vocab_size) {
  if (size < 1 || size > vocab_size) {
    throw ConfigError("compress_vocab: size must lie in [1, " + std::to_string(vocab_size) + "]");
  }
  std::vector<TokenId> uniq_specials(specials.begin(), specials.end());
  std::sort(uniq_specials.begin(), uniq_specials.end());
  uniq_specials.erase(std::unique(uniq_specials.begin(), uniq_specials.end()), uniq_specials.end());
  if (size < uniq_specials.size()) throw ConfigError("compress_vocab: size is smaller than the special-token count");

  std::vector<TokenId> ranking;
  std::vector<bool> seen(vocab_size, false);
  for (const auto& [t, c] : table.ranked()) {
    if (t >= 0 && static_cast<std::size_t>(t) < vocab_size && !seen[static_cast<std::size_t>(t)]) {
      ranking.push_back(t);
      seen[static_cast<std::size_t>(t)] = true;
    }
  }
  for (std::size_t t = 0; t < vocab_size; ++t) {
    if (!seen[t]) ranking.push_back(static_cast<TokenId>(t));
  }

  std::vector<TokenId> keep(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(size));
  std::vector<TokenId> missing;
  for (TokenId s : uniq_specials) {
    if (std::find(keep.begin(), keep.end(), s) == keep.end()) missing.push_back(s);
  }
  // Displace from the tail, skipping specials already present.
  for (std::size_t pos = keep.size(); !missing.empty() && pos-- > 0;) {
    if (std::binary_search(uniq_specials.begin(), uniq_specials.end(), keep[pos])) continue;
    keep[pos] = missing.back();
    missing.pop_back();
  }
  std::sort(keep.begin(), keep.end());
  return CompressedVocab(table.lang, std::move(keep), vocab_size);
}

// Smallest compressed vocabulary (specials included) whose keep set covers
// `target` of the table. Forced specials can displace counted tokens, so
// this may need a few more entries than size_for_coverage.
inline CompressedVocab compress_to_coverage(const FrequencyTable& table, double target,
                                            std::span<const TokenId> specials, std::size_t vocab_size) {
  std::size_t size = std::clamp<std::size_t>(size_for_coverage(table, target), std::max<std::size_t>(specials.size(), 1),
                                             vocab_size);
  CompressedVocab cv = compress_vocab(table, size, specials, vocab_size);
  while (size < vocab_size && coverage(table, cv.keep()) < target) cv = compress_vocab(table, ++size, specials, vocab_size);
  return cv;
}

struct CompressedDraft {
  Tensor logits;  // [|keep|] in compressed index space
  TokenId token;  // argmax mapped back to a full-vocabulary id
};

// Logits for one pre-logit row against W~ only.
inline CompressedDraft draft_logits_compressed(std::span<const double> pre_logit, const CompressedVocab& cv,
                                               OpCounter* ops = nullptr) {
  cv.validate();
  const Tensor& w = cv.rows();
  require(pre_logit.size() == w.cols(), "draft_logits_compressed: state width mismatch");
  CompressedDraft out{Tensor({cv.size()}), 0};
  kernels::linear(pre_logit.data(), 1, w.cols(), w.ptr(), w.rows(), out.logits.ptr());
  if (ops) ops->multiplies += cv.size() * w.cols();
  out.token = cv.full_id(static_cast<std::size_t>(greedy_argmax(out.logits.data())));
  return out;
}

// Full-vocabulary counterpart with the same accounting.
inline CompressedDraft draft_logits_full(std::span<const double> pre_logit, const Tensor& w, OpCounter* ops = nullptr) {
  require(pre_logit.size() == w.cols(), "draft_logits_full: state width mismatch");
  CompressedDraft out{Tensor({w.rows()}), 0};
  kernels::linear(pre_logit.data(), 1, w.cols(), w.ptr(), w.rows(), out.logits.ptr());
  if (ops) ops->multiplies += w.rows() * w.cols();
  out.token = greedy_argmax(out.logits.data());
  return out;
}

// ---------------------------------------------------------------------------
// Language dispatch.

inline const std::string kFullVocabTag = "full";
inline constexpr std::size_t kLanguageWindow = 128;
inline constexpr double kCjkThreshold = 0.3;

class VocabBank {
 public:
  void add(CompressedVocab cv) {
    std::string tag = cv.lang();
    by_lang_.insert_or_assign(std::move(tag), std::move(cv));
  }

  // nullptr means the full vocabulary; unknown tags fall back to it.
  const CompressedVocab* lookup(const std::string& tag) const {
    auto it = by_lang_.find(tag);
    return it == by_lang_.end() ? nullptr : &it->second;
  }

  bool contains(const std::string& tag) const { return by_lang_.count(tag) != 0; }
  std::size_t size() const { return by_lang_.size(); }
  const std::map<std::string, CompressedVocab>& entries() const { return by_lang_; }

  // Re-points every entry at `w` (after the bank was copied or moved).
  void attach(const Tensor& w) {
    for (auto& [tag, cv] : by_lang_) cv.attach(w);
  }

 private:
  std::map<std::string, CompressedVocab> by_lang_;
};

// "zh" when at least 30% of the trailing 128 tokens belong to CJK
// codepoints, "en" otherwise, and the full-vocabulary tag for an empty
// context.
inline std::string detect_language(std::span<const TokenId> context) {
  if (context.empty()) return kFullVocabTag;
  const std::size_t n = std::min(context.size(), kLanguageWindow);
  // Decode from up to 3 tokens earlier so a codepoint cut by the window edge
  // still counts.
  const std::size_t begin = context.size() - std::min(context.size(), n + 3);
  auto mask = cjk_token_mask(context.subspan(begin));
  std::size_t cjk = 0;
  for (std::size_t i = mask.size() - n; i < mask.size(); ++i) cjk += mask[i] ? 1 : 0;
  return static_cast<double>(cjk) >= kCjkThreshold * static_cast<double>(n) ? "zh" : "en";
}

// ---------------------------------------------------------------------------
// Files.

inline nlohmann::json frequency_table_json(const FrequencyTable& t) {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& [id, c] : t.ranked()) counts.push_back({id, c});
  return {{"lang", t.lang}, {"total", t.total}, {"counts", counts}};
}

inline FrequencyTable frequency_table_from_json(const nlohmann::json& j) {
  FrequencyTable t;
  t.lang = j.at("lang").get<std::string>();
  t.total = j.at("total").get<std::uint64_t>();
  std::uint64_t sum = 0;
  for (const auto& e : j.at("counts")) {
    const auto id = e.at(0).get<TokenId>();
    const auto c = e.at(1).get<std::uint64_t>();
    t.counts[id] += c;
    sum += c;
  }
  if (sum != t.total) throw IoError("frequency table: counts do not sum to total");
  return t;
}

inline nlohmann::json compressed_vocab_json(const CompressedVocab& cv) {
  return {{"lang", cv.lang()},
          {"size", cv.size()},
          {"vocab_size", cv.full_size()},
          {"keep", std::vector<TokenId>(cv.keep().begin(), cv.keep().end())}};
}

inline CompressedVocab compressed_vocab_from_json(const nlohmann::json& j) {
  auto keep = j.at("keep").get<std::vector<TokenId>>();
  if (keep.size() != j.at("size").get<std::size_t>()) throw IoError("compressed vocab: size does not match keep list");
  return CompressedVocab(j.at("lang").get<std::string>(), std::move(keep), j.at("vocab_size").get<std::size_t>());
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

}  // namespace mtpdraft
