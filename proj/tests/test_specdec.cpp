// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <vector>

#include "mtpdraft/pipeline.hpp"
#include "mtpdraft/specdec.hpp"

using namespace mtpdraft;

namespace {

ModelConfig small_config(std::size_t V = 32) {
  ModelConfig c;
  c.vocab_size = V;
  c.model_dim = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 64;
  c.seed = 5;
  return c;
}

TokenSequence random_prompt(std::mt19937_64& rng, std::size_t V, std::size_t min_len = 1, std::size_t max_len = 8) {
  const std::size_t len = min_len + rng() % (max_len - min_len + 1);
  TokenSequence p(len);
  for (auto& t : p) t = static_cast<TokenId>(2 + rng() % (V - 2));
  return p;
}

// The period-4 toy, trained once and shared by every test in this file.
const PeriodicArtifacts& periodic() {
  static const PeriodicArtifacts a = run_periodic_pipeline(PeriodicSection{});
  return a;
}

// Injects `drafts` into a round drafted by the session itself.
VerificationOutcome verify_with(DecodeSession& s, TokenSequence drafts) {
  DraftRound r = s.draft_round(drafts.size());
  r.drafts = std::move(drafts);
  return s.verify_round(r);
}

}  // namespace

TEST(Verify, PartialAcceptance) {
  auto [main, head] = init_model(small_config());
  const TokenSequence prompt = {5, 9, 3};
  const TokenSequence ref = baseline_decode(main, prompt, 10, false);
  DecodeSession s(main, &head, prompt, {3, 10, VocabMode::full(), false});
  // Greedy continuation after the pending token ref[0] is ref[1], ref[2], ...
  const TokenId wrong = static_cast<TokenId>((ref[3] + 1) % 32);
  const auto v = verify_with(s, {ref[1], ref[2], wrong});
  EXPECT_EQ(v.accepted, 2u);
  EXPECT_EQ(v.next_token, ref[3]);
  EXPECT_EQ(v.committed(), 3u);
  EXPECT_EQ(v.matched, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(s.output(), TokenSequence(ref.begin(), ref.begin() + 4));
}

TEST(Verify, FullAcceptanceAddsBonusToken) {
  auto [main, head] = init_model(small_config());
  const TokenSequence prompt = {7, 7, 2, 30};
  const TokenSequence ref = baseline_decode(main, prompt, 10, false);
  DecodeSession s(main, &head, prompt, {3, 10, VocabMode::full(), false});
  const auto v = verify_with(s, {ref[1], ref[2], ref[3]});
  EXPECT_EQ(v.accepted, 3u);
  EXPECT_EQ(v.next_token, ref[4]);
  EXPECT_EQ(v.committed(), 4u);
  EXPECT_EQ(s.metrics().tau(), 4.0);
}

TEST(Verify, FirstMismatchAcceptsNothing) {
  auto [main, head] = init_model(small_config());
  const TokenSequence prompt = {11, 4};
  const TokenSequence ref = baseline_decode(main, prompt, 10, false);
  DecodeSession s(main, &head, prompt, {3, 10, VocabMode::full(), false});
  const TokenId y = static_cast<TokenId>((ref[1] + 5) % 32);
  const auto v = verify_with(s, {y, ref[2], ref[3]});
  EXPECT_EQ(v.accepted, 0u);
  EXPECT_EQ(v.next_token, ref[1]);
  EXPECT_EQ(v.committed(), 1u);
  EXPECT_EQ(s.metrics().tau(), 1.0);
}

TEST(Verify, StaleRoundIsRejected) {
  auto [main, head] = init_model(small_config());
  const TokenSequence prompt = {3, 4, 5};
  DecodeSession s(main, &head, prompt, {2, 20, VocabMode::full(), false});
  const DraftRound r = s.draft_round(2);
  s.verify_round(r);
  EXPECT_THROW(s.verify_round(r), StateError);
  DecodeSession other(main, &head, prompt, {2, 20, VocabMode::full(), false});
  other.verify_round(other.draft_round(2));
  DraftRound fresh = s.draft_round(2);
  fresh.base_length += 1;
  EXPECT_THROW(s.verify_round(fresh), StateError);
}

TEST(Verify, InjectedDraftsAtEveryAcceptanceLevelStayLossless) {
  // Forces every acceptance count 0..K in turn and checks the final output.
  auto [main, head] = init_model(small_config());
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 32);
    const TokenSequence ref = baseline_decode(main, prompt, 30, false);
    DecodeSession s(main, &head, prompt, {4, 30, VocabMode::full(), false});
    std::size_t level = 0;
    while (!s.done()) {
      const std::size_t have = s.output().size();
      const std::size_t room = 30 - have;
      const std::size_t K = std::min<std::size_t>(4, room - 1);
      TokenSequence drafts(ref.begin() + static_cast<std::ptrdiff_t>(have),
                           ref.begin() + static_cast<std::ptrdiff_t>(have + K));
      const std::size_t accept = std::min(level++ % 5, K);
      if (accept < K) drafts[accept] = static_cast<TokenId>((drafts[accept] + 1) % 32);
      DraftRound r = s.draft_round(K);
      r.drafts = drafts;
      const auto v = s.verify_round(r);
      EXPECT_EQ(v.accepted, accept);
    }
    EXPECT_EQ(s.output(), ref);
  }
}

TEST(SpecDecode, ZeroDepthIsBaseline) {
  auto [main, head] = init_model(small_config());
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 32);
    const auto r = speculative_decode(main, nullptr, prompt, 20, 0);
    EXPECT_EQ(r.output, baseline_decode(main, prompt, 20));
    EXPECT_EQ(r.metrics.tau(), 1.0);
    EXPECT_EQ(r.metrics.draft_forwards, 0u);
    for (const auto& rec : r.log) EXPECT_TRUE(rec.drafts.empty());
  }
}

TEST(SpecDecode, LosslessForRandomModels) {
  auto [main, head] = init_model(small_config());
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 32);
    const TokenSequence ref = baseline_decode(main, prompt, 24);
    for (std::size_t K : {1, 2, 3, 4}) {
      EXPECT_EQ(speculative_decode(main, &head, prompt, 24, K).output, ref) << "K=" << K;
    }
  }
}

TEST(SpecDecode, LosslessOnTrainedPeriodicModel) {
  const auto& p = periodic();
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 25; ++trial) {
    // Off-cycle prompts too, so rounds reject at varied depths.
    const TokenSequence prompt = random_prompt(rng, 16, 1, 6);
    const TokenSequence ref = baseline_decode(*p.main, prompt, 30);
    for (std::size_t K : {1, 2, 3, 4, 6}) {
      EXPECT_EQ(speculative_decode(*p.main, p.head.get(), prompt, 30, K).output, ref) << "K=" << K;
    }
  }
}

TEST(SpecDecode, PeriodicModelFollowsTheCycleAndAcceptsEverything) {
  const auto& p = periodic();
  for (const auto& prompt : p.task.prompts) {
    const TokenSequence expect = p.language.continuation(prompt, 41);
    EXPECT_EQ(baseline_decode(*p.main, prompt, 41, false), expect);
    DecodeSession s(*p.main, p.head.get(), prompt, {3, 41, VocabMode::full(), false});
    while (!s.done()) {
      const std::size_t before = s.tokens().size();
      const DraftRound r = s.draft_round(3);
      ASSERT_EQ(r.drafts.size(), 3u);
      for (std::size_t k = 0; k < 3; ++k) {
        EXPECT_EQ(r.drafts[k], expect[before - prompt.size() + k]);
      }
      EXPECT_EQ(s.verify_round(r).accepted, 3u);
    }
    EXPECT_EQ(s.output(), expect);
    EXPECT_EQ(s.metrics().tau(), 4.0);
  }
}

TEST(SpecDecode, UntrainedHeadRarelyAgrees) {
  ModelConfig c;  // V = 512
  c.seed = 8;
  auto [main, head] = init_model(c);
  std::mt19937_64 rng(7);
  DecodeMetrics total;
  for (int trial = 0; trial < 12; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 512, 4, 12);
    total.merge(speculative_decode(main, &head, prompt, 32, 3).metrics);
  }
  EXPECT_LT(total.tau() - 1.0, 0.1);
}

TEST(SpecDecode, CountsAndBounds) {
  auto [main, head] = init_model(small_config());
  std::mt19937_64 rng(8);
  const auto& p = periodic();
  for (int trial = 0; trial < 10; ++trial) {
    for (bool trained : {false, true}) {
      const MainModel& m = trained ? *p.main : main;
      const MTPHead* h = trained ? p.head.get() : &head;
      const TokenSequence prompt = random_prompt(rng, trained ? 16 : 32);
      for (std::size_t K : {1, 3}) {
        const auto r = speculative_decode(m, h, prompt, 25, K, VocabMode::full(), false);
        const auto& mt = r.metrics;
        EXPECT_EQ(mt.main_forwards, mt.rounds + 1);
        std::size_t drafted = 0, committed = 0;
        for (const auto& rec : r.log) {
          drafted += rec.drafts.size();
          committed += rec.accepted + 1;
          EXPECT_LE(rec.drafts.size(), K);
        }
        EXPECT_EQ(mt.draft_forwards, drafted);
        EXPECT_EQ(mt.total_output_tokens, committed);
        EXPECT_EQ(r.output.size(), committed + 1);  // plus the prefill token
        EXPECT_GE(mt.tau(), 1.0);
        EXPECT_LE(mt.tau(), static_cast<double>(K + 1));
        if (mt.accepted_drafts == 0) {
          EXPECT_EQ(mt.tau(), 1.0);
        }
      }
    }
  }
}

TEST(SpecDecode, BudgetAndEmptyContinuation) {
  auto [main, head] = init_model(small_config());
  const TokenSequence prompt = {4, 5};
  EXPECT_TRUE(baseline_decode(main, prompt, 0).empty());
  const auto r = speculative_decode(main, &head, prompt, 0, 3);
  EXPECT_TRUE(r.output.empty());
  EXPECT_EQ(r.metrics.rounds, 0u);
  for (std::size_t n : {1, 2, 3, 4, 5, 7}) {
    EXPECT_EQ(speculative_decode(main, &head, prompt, n, 4, VocabMode::full(), false).output.size(), n);
  }
  EXPECT_THROW(speculative_decode(main, &head, prompt, 63, 3), CapacityError);
  EXPECT_THROW(speculative_decode(main, nullptr, prompt, 5, 2), ConfigError);
  EXPECT_THROW(speculative_decode(main, &head, TokenSequence{}, 5, 2), DimensionError);
}

TEST(SpecDecode, BaselineIsDeterministic) {
  auto [main, head] = init_model(small_config());
  const TokenSequence prompt = {9, 8, 7};
  EXPECT_EQ(baseline_decode(main, prompt, 30), baseline_decode(main, prompt, 30));
}

TEST(SpecDecode, StopsAtEndOfSequence) {
  // Promote EOS: its output row becomes a scaled copy of a token the model
  // does emit, so greedy decoding picks EOS wherever it picked that token.
  auto [main, head] = init_model(small_config(12));
  std::mt19937_64 rng(9);
  int stopped = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 12);
    MainModel m = main;
    const TokenSequence free_run = baseline_decode(m, prompt, 40, false);
    const auto src = static_cast<std::size_t>(free_run[free_run.size() / 2]);
    for (std::size_t j = 0; j < m.config.model_dim; ++j) m.embed.at(kEosToken, j) = 1.5 * m.embed.at(src, j);
    const TokenSequence ref = baseline_decode(m, prompt, 40, true);
    if (!ref.empty() && ref.back() == kEosToken) ++stopped;
    for (std::size_t K : {1, 3, 5}) {
      EXPECT_EQ(speculative_decode(m, &head, prompt, 40, K, VocabMode::full(), true).output, ref) << "K=" << K;
    }
  }
  EXPECT_GT(stopped, 5);
}

TEST(SpecDecode, AcceptedEndOfSequenceDraftEndsGeneration) {
  // Build drafts from a no-stop reference that runs past an EOS.
  auto [main, head] = init_model(small_config(12));
  std::mt19937_64 rng(10);
  int checked = 0;
  for (int trial = 0; trial < 200 && checked < 5; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 12);
    const TokenSequence run_on = baseline_decode(main, prompt, 40, false);
    const auto eos = std::find(run_on.begin() + 1, run_on.end() - 4, kEosToken);
    if (eos == run_on.end() - 4) continue;
    const TokenSequence ref = baseline_decode(main, prompt, 40, true);
    DecodeSession s(main, &head, prompt, {4, 40, VocabMode::full(), true});
    while (!s.done()) {
      const std::size_t have = s.output().size();
      const std::size_t K = std::min<std::size_t>(4, 40 - have - 1);
      DraftRound r = s.draft_round(K);
      r.drafts.assign(run_on.begin() + static_cast<std::ptrdiff_t>(have),
                      run_on.begin() + static_cast<std::ptrdiff_t>(have + K));
      s.verify_round(r);
    }
    EXPECT_EQ(s.output(), ref);
    EXPECT_EQ(s.output().back(), kEosToken);
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(SpecDecode, EveryStepUsesTheSameHeadAndVerifyUsesFullVocab) {
  const auto& p = periodic();
  FrequencyTable t;
  t.lang = "tiny";
  t.counts = {{2, 5}, {3, 4}, {4, 3}};
  t.total = 12;
  CompressedVocab cv = compress_vocab(t, 4, special_tokens(), 16);
  cv.attach(p.main->output_head());
  DecodeSession s(*p.main, p.head.get(), p.task.prompts[0], {3, 20, VocabMode::fixed_vocab(cv), false});
  const DraftRound r = s.draft_round(3);
  for (const MTPHead* h : r.head_per_step) EXPECT_EQ(h, p.head.get());
  for (const Tensor& l : r.logits) EXPECT_EQ(l.size(), 4u);
  for (TokenId d : r.drafts) EXPECT_TRUE(cv.contains(d));
  const std::size_t before = s.tokens().size();
  s.verify_round(r);
  // Verification never consults the compressed rows: output stays lossless.
  const TokenSequence ref = baseline_decode(*p.main, p.task.prompts[0], 20, false);
  const TokenSequence out = s.output();
  EXPECT_EQ(out, TokenSequence(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(out.size())));
  EXPECT_GT(s.tokens().size(), before);
}

TEST(Rollback, MainCacheMatchesRecomputation) {
  auto [main, head] = init_model(small_config());
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 8; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 32);
    DecodeSession s(main, &head, prompt, {3, 30, VocabMode::full(), false});
    while (!s.done()) {
      s.verify_round(s.draft_round(3));
      const TokenSequence& toks = s.tokens();
      ASSERT_EQ(s.main_cache().length(), toks.size() - 1);
      KVCache cached = s.main_cache();
      const TokenId pending[] = {toks.back()};
      const MainOutput inc = main_forward(main, pending, cached);
      KVCache scratch = KVCache::for_main(main.config);
      const MainOutput full = main_forward(main, toks, scratch, true);
      for (std::size_t v = 0; v < 32; ++v) EXPECT_NEAR(inc.logits.at(0, v), full.logits.at(0, v), 1e-9);
    }
  }
}

TEST(Rollback, HeadStreamMatchesFreshSession) {
  // After any round, the next drafts equal those of a session rebuilt from
  // the verified prefix, so the retained head stream is sound.
  auto [main, head] = init_model(small_config());
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 8; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 32, 2, 8);
    DecodeSession s(main, &head, prompt, {3, 30, VocabMode::full(), false});
    while (!s.done()) {
      const TokenSequence& toks = s.tokens();
      const TokenSequence prefix(toks.begin(), toks.end() - 1);
      const std::size_t left = 30 - s.output().size() + 1;
      DecodeSession fresh(main, &head, prefix, {3, left, VocabMode::full(), false});
      ASSERT_EQ(fresh.tokens(), toks);
      const DraftRound a = s.draft_round(3);
      const DraftRound b = fresh.draft_round(3);
      EXPECT_EQ(a.drafts, b.drafts);
      EXPECT_LE(s.head_cache().length(), s.main_cache().length() + 3);
      EXPECT_EQ(s.head_cache().length(), s.main_cache().length() + a.drafts.size() - 1);
      s.verify_round(a);
      EXPECT_LE(s.head_cache().length(), s.main_cache().length());
    }
  }
}

TEST(RoundLog, ReplayReproducesMetrics) {
  const auto& p = periodic();
  auto [main, head] = init_model(small_config(16));
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const TokenSequence prompt = random_prompt(rng, 16);
    const auto r = speculative_decode(*p.main, trial % 2 ? p.head.get() : &head, prompt, 30, 3);
    std::stringstream ss;
    write_round_log(ss, r.log);
    const auto back = read_round_log(ss);
    EXPECT_EQ(back, r.log);
    const LogReplay rep = replay_round_log(back);
    EXPECT_EQ(rep.rounds, r.metrics.rounds);
    EXPECT_NEAR(rep.tau(), r.metrics.tau(), 1e-9);
    EXPECT_NEAR(rep.tau(), 1.0 + static_cast<double>(r.metrics.accepted_drafts) / std::max<double>(1, r.metrics.rounds),
                1e-9);
    for (std::size_t k = 1; k <= 3; ++k) {
      const double a = rep.acceptance_rate(k), b = r.metrics.acceptance_rate(k);
      if (std::isnan(b)) {
        EXPECT_TRUE(std::isnan(a));
      } else {
        EXPECT_EQ(a, b);
      }
    }
  }
  std::stringstream bad("{\"round\": 0}\n");
  EXPECT_THROW(read_round_log(bad), IoError);
  RoundRecord broken;
  broken.drafts = {3};
  broken.accepted = 2;
  EXPECT_THROW(replay_round_log(std::span(&broken, 1)), ConsistencyError);
}

TEST(Metrics, MergeAddsCounters) {
  DecodeMetrics a, b;
  a.rounds = 2;
  a.total_output_tokens = 5;
  a.drafted_at_step = {2, 1};
  a.accepted_at_step = {1, 0};
  b.rounds = 1;
  b.total_output_tokens = 4;
  b.drafted_at_step = {1, 1, 1};
  b.accepted_at_step = {1, 1, 1};
  a.merge(b);
  EXPECT_EQ(a.rounds, 3u);
  EXPECT_DOUBLE_EQ(a.tau(), 3.0);
  EXPECT_DOUBLE_EQ(a.acceptance_rate(1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(a.acceptance_rate(3), 1.0);
  EXPECT_TRUE(std::isnan(a.acceptance_rate(4)));
  EXPECT_DOUBLE_EQ(DecodeMetrics{}.tau(), 1.0);
}
