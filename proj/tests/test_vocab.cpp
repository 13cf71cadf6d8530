// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <vector>

#include "mtpdraft/corpus.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/vocab.hpp"

using namespace mtpdraft;

namespace {

constexpr TokenId a = 10, b = 11, c = 12;

FrequencyTable abc_table() {
  const std::vector<TokenSequence> corpus = {{a, a, b, a, c}};
  return build_frequency_table(corpus, "x");
}

Tensor random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t({rows, cols});
  for (double& x : t.data()) x = n(rng);
  return t;
}

}  // namespace

TEST(FrequencyTable, ExactCounts) {
  const FrequencyTable t = abc_table();
  EXPECT_EQ(t.count(a), 3u);
  EXPECT_EQ(t.count(b), 1u);
  EXPECT_EQ(t.count(c), 1u);
  EXPECT_EQ(t.count(99), 0u);
  EXPECT_EQ(t.total, 5u);
  EXPECT_EQ(t.counts.size(), 3u);
}

TEST(FrequencyTable, ConcatenationAddsElementwise) {
  const std::vector<TokenSequence> x = {{1, 2, 2, 3}}, y = {{2, 4, 4}};
  std::vector<TokenSequence> xy = x;
  xy.insert(xy.end(), y.begin(), y.end());
  FrequencyTable sum = build_frequency_table(x, "x");
  sum += build_frequency_table(y, "x");
  EXPECT_EQ(sum, build_frequency_table(xy, "x"));
}

TEST(FrequencyTable, EmptyCorpusThrows) {
  const std::vector<TokenSequence> none;
  EXPECT_THROW(build_frequency_table(none, "x"), EmptyTableError);
  const std::vector<TokenSequence> blank = {{}, {}};
  EXPECT_THROW(build_frequency_table(blank, "x"), EmptyTableError);
}

TEST(FrequencyTable, ZipfCorpusIsLongTailed) {
  std::mt19937_64 rng(5);
  const std::vector<TokenSequence> corpus = {zipf_tokens(200000, 512, 0, 1.0, rng)};
  const FrequencyTable t = build_frequency_table(corpus, "zipf");
  std::vector<TokenId> top;
  for (const auto& [id, cnt] : t.ranked()) {
    if (top.size() == 64) break;
    top.push_back(id);
  }
  EXPECT_GT(coverage(t, top), 0.60);
}

TEST(FrequencyTable, JsonRoundTrip) {
  const FrequencyTable t = abc_table();
  const auto j = frequency_table_json(t);
  EXPECT_EQ(j.at("total").get<std::uint64_t>(), 5u);
  EXPECT_EQ(j.at("counts").at(0).at(0).get<TokenId>(), a);
  EXPECT_EQ(frequency_table_from_json(j), t);
}

TEST(CompressVocab, TieBrokenByLowerId) {
  const CompressedVocab cv = compress_vocab(abc_table(), 2, {}, 16);
  EXPECT_EQ(std::vector<TokenId>(cv.keep().begin(), cv.keep().end()), (std::vector<TokenId>{a, b}));
}

TEST(CompressVocab, SpecialsDisplaceLowestRanked) {
  const TokenId specials[] = {kPadToken, kEosToken};
  const CompressedVocab cv = compress_vocab(abc_table(), 3, specials, 16);
  EXPECT_EQ(std::vector<TokenId>(cv.keep().begin(), cv.keep().end()),
            (std::vector<TokenId>{kPadToken, kEosToken, a}));
  EXPECT_THROW(compress_vocab(abc_table(), 1, specials, 16), ConfigError);
  EXPECT_THROW(compress_vocab(abc_table(), 0, {}, 16), ConfigError);
  EXPECT_THROW(compress_vocab(abc_table(), 17, {}, 16), ConfigError);
}

TEST(CompressVocab, KeepIsSortedUniqueAndContainsSpecials) {
  std::mt19937_64 rng(8);
  const std::vector<TokenSequence> corpus = {zipf_tokens(5000, 200, 2, 1.0, rng)};
  const FrequencyTable t = build_frequency_table(corpus, "z");
  const auto specials = special_tokens();
  for (std::size_t size : {2u, 5u, 33u, 128u, 256u}) {
    const CompressedVocab cv = compress_vocab(t, size, specials, 256);
    ASSERT_EQ(cv.size(), size);
    EXPECT_TRUE(std::is_sorted(cv.keep().begin(), cv.keep().end()));
    EXPECT_EQ(std::adjacent_find(cv.keep().begin(), cv.keep().end()), cv.keep().end());
    for (TokenId s : specials) EXPECT_TRUE(cv.contains(s));
    for (std::size_t i = 0; i < cv.size(); ++i) EXPECT_EQ(cv.compressed_index(cv.full_id(i)), static_cast<int>(i));
  }
}

TEST(CompressVocab, CoverageMonotoneInSize) {
  std::mt19937_64 rng(9);
  const std::vector<TokenSequence> corpus = {zipf_tokens(20000, 300, 2, 1.1, rng)};
  const FrequencyTable t = build_frequency_table(corpus, "z");
  double prev = 0.0;
  for (std::size_t size = 1; size <= 302; ++size) {
    const CompressedVocab cv = compress_vocab(t, size, {}, 302);
    const double cov = coverage(t, cv.keep());
    EXPECT_GE(cov, prev);
    prev = cov;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
  const std::size_t n99 = size_for_coverage(t, 0.99);
  EXPECT_GE(coverage(t, compress_vocab(t, n99, {}, 302).keep()), 0.99);
  EXPECT_LT(coverage(t, compress_vocab(t, n99 - 1, {}, 302).keep()), 0.99);
}

TEST(CompressVocab, CoverageTargetCountsForcedSpecials) {
  std::mt19937_64 rng(10);
  const std::vector<TokenSequence> corpus = {zipf_tokens(20000, 300, 2, 1.0, rng)};
  const FrequencyTable t = build_frequency_table(corpus, "z");
  for (double target : {0.5, 0.9, 0.99}) {
    const CompressedVocab cv = compress_to_coverage(t, target, special_tokens(), 302);
    EXPECT_GE(coverage(t, cv.keep()), target);
    // Minimal: one entry fewer misses the target.
    EXPECT_LT(coverage(t, compress_vocab(t, cv.size() - 1, special_tokens(), 302).keep()), target);
    for (TokenId s : special_tokens()) EXPECT_GE(cv.compressed_index(s), 0);
  }
  EXPECT_EQ(compress_to_coverage(t, 1.0, special_tokens(), 302).size(), 302u);
}

TEST(CompressVocab, JsonRoundTrip) {
  const CompressedVocab cv = compress_vocab(abc_table(), 4, special_tokens(), 16);
  const auto j = compressed_vocab_json(cv);
  EXPECT_EQ(j.at("size").get<std::size_t>(), 4u);
  const CompressedVocab back = compressed_vocab_from_json(j);
  EXPECT_EQ(std::vector<TokenId>(back.keep().begin(), back.keep().end()),
            std::vector<TokenId>(cv.keep().begin(), cv.keep().end()));
  EXPECT_EQ(back.lang(), "x");
  EXPECT_EQ(back.full_size(), 16u);
}

TEST(DraftLogits, IdentityCompressionMatchesFull) {
  const Tensor w = random_matrix(40, 8, 1);
  CompressedVocab cv = compress_vocab(abc_table(), 40, {}, 40);
  ASSERT_TRUE(cv.is_identity());
  cv.attach(w);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor h = random_matrix(1, 8, rng());
    const auto comp = draft_logits_compressed(h.row(0), cv);
    const auto full = draft_logits_full(h.row(0), w);
    EXPECT_EQ(comp.token, full.token);
    for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(comp.logits[i], full.logits[static_cast<std::size_t>(cv.full_id(i))]);
  }
}

TEST(DraftLogits, RestrictedArgmaxEquivalence) {
  // Brute force: the compressed choice equals the full choice exactly when
  // the full choice is kept; otherwise it is the best kept token.
  const Tensor w = random_matrix(64, 8, 3);
  std::vector<TokenId> keep;
  for (TokenId t = 0; t < 64; t += 3) keep.push_back(t);
  CompressedVocab cv("x", keep, 64);
  cv.attach(w);
  std::mt19937_64 rng(4);
  int inside = 0, outside = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const Tensor h = random_matrix(1, 8, rng());
    const auto full = draft_logits_full(h.row(0), w);
    const auto comp = draft_logits_compressed(h.row(0), cv);
    if (cv.contains(full.token)) {
      EXPECT_EQ(comp.token, full.token);
      ++inside;
    } else {
      EXPECT_NE(comp.token, full.token);
      TokenId best = keep[0];
      for (TokenId t : keep) {
        if (full.logits[static_cast<std::size_t>(t)] > full.logits[static_cast<std::size_t>(best)]) best = t;
      }
      EXPECT_EQ(comp.token, best);
      ++outside;
    }
  }
  EXPECT_GT(inside, 0);
  EXPECT_GT(outside, 0);
}

TEST(DraftLogits, MultiplyCountIsKeepTimesWidth) {
  const Tensor w = random_matrix(100, 12, 5);
  std::vector<TokenId> keep = {1, 7, 20, 50, 99};
  CompressedVocab cv("x", keep, 100);
  cv.attach(w);
  OpCounter ops;
  const Tensor h = random_matrix(1, 12, 6);
  for (int i = 0; i < 3; ++i) draft_logits_compressed(h.row(0), cv, &ops);
  EXPECT_EQ(ops.multiplies, 3u * 5u * 12u);
  OpCounter full_ops;
  draft_logits_full(h.row(0), w, &full_ops);
  EXPECT_EQ(full_ops.multiplies, 100u * 12u);
}

TEST(DraftLogits, RowsAreExactCopiesOfTheHead) {
  const Tensor w = random_matrix(30, 4, 7);
  std::vector<TokenId> keep = {0, 3, 29};
  CompressedVocab cv("x", keep, 30);
  cv.attach(w);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(cv.rows().at(i, j), w.at(static_cast<std::size_t>(keep[i]), j));
  }
}

TEST(DraftLogits, StaleHeadIsDetected) {
  Tensor w = random_matrix(30, 4, 7);
  CompressedVocab cv("x", {2, 5, 9}, 30);
  EXPECT_THROW(cv.validate(), StateError);
  cv.attach(w);
  EXPECT_NO_THROW(cv.validate());
  const Tensor h = random_matrix(1, 4, 8);
  w.at(5, 2) += 1e-12;
  EXPECT_THROW(draft_logits_compressed(h.row(0), cv), ConsistencyError);
  w.at(5, 2) -= 1e-12;
  w.at(6, 0) += 1.0;  // a row outside keep does not matter
  EXPECT_NO_THROW(draft_logits_compressed(h.row(0), cv));
}

TEST(DraftLogits, WidthMismatchThrows) {
  const Tensor w = random_matrix(10, 4, 1);
  CompressedVocab cv("x", {1, 2}, 10);
  cv.attach(w);
  const std::vector<double> h(5, 0.0);
  EXPECT_THROW(draft_logits_compressed(h, cv), DimensionError);
  EXPECT_THROW(cv.attach(random_matrix(11, 4, 1)), DimensionError);
}

TEST(DetectLanguage, Examples) {
  EXPECT_EQ(detect_language(encode_bytes("the river is slow in summer")), "en");
  EXPECT_EQ(detect_language(encode_bytes("夏天的河水流得很慢")), "zh");
  EXPECT_EQ(detect_language({}), kFullVocabTag);
}

TEST(DetectLanguage, ThresholdAndWindow) {
  // 3 CJK characters (9 tokens) + 21 ASCII bytes: ratio 9/30 = 0.3 exactly.
  EXPECT_EQ(detect_language(encode_bytes("河水流" + std::string(21, 'a'))), "zh");
  EXPECT_EQ(detect_language(encode_bytes("河水流" + std::string(22, 'a'))), "en");
  // Only the trailing 128 tokens count.
  EXPECT_EQ(detect_language(encode_bytes(std::string("夏天的河水流得很慢夏天的河水流得很慢") + std::string(128, 'a'))), "en");
  EXPECT_EQ(detect_language(encode_bytes(std::string(500, 'a') + "夏天的河水流得很慢夏天的河水流")), "zh");
}

TEST(VocabBank, UnknownTagFallsBackToFull) {
  VocabBank bank;
  bank.add(compress_vocab(abc_table(), 3, {}, 16));
  EXPECT_NE(bank.lookup("x"), nullptr);
  EXPECT_EQ(bank.lookup("klingon"), nullptr);
  EXPECT_EQ(bank.lookup(kFullVocabTag), nullptr);
}

TEST(VocabBank, LanguageChangesOnlyTheRowsConsulted) {
  const Tensor w = random_matrix(50, 6, 11);
  VocabBank bank;
  bank.add(CompressedVocab("en", {1, 4, 9, 16, 25}, 50));
  bank.add(CompressedVocab("zh", {1, 2, 3, 30, 40, 49}, 50));
  bank.attach(w);
  for (const auto& [tag, cv] : bank.entries()) {
    for (std::size_t i = 0; i < cv.size(); ++i) {
      for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(cv.rows().at(i, j), w.at(static_cast<std::size_t>(cv.full_id(i)), j));
    }
  }
  const Tensor h = random_matrix(1, 6, 12);
  EXPECT_TRUE(bank.lookup("en")->contains(draft_logits_compressed(h.row(0), *bank.lookup("en")).token));
  EXPECT_TRUE(bank.lookup("zh")->contains(draft_logits_compressed(h.row(0), *bank.lookup("zh")).token));
}

TEST(VocabFiles, WriteAndReadJson) {
  const auto dir = std::filesystem::temp_directory_path() / "mtpdraft_vocab_test";
  std::filesystem::create_directories(dir);
  const FrequencyTable t = abc_table();
  write_json_file(dir / "t.json", frequency_table_json(t));
  EXPECT_EQ(frequency_table_from_json(read_json_file(dir / "t.json")), t);
  EXPECT_THROW(read_json_file(dir / "missing.json"), IoError);
  std::filesystem::remove_all(dir);
}
