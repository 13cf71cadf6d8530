// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end acceptance run. Builds the desk artifacts once, then checks each
// criterion and prints one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria. NOTE lines are informational.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mtpdraft/mtpdraft.hpp"

using namespace mtpdraft;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdicts {
  int failed = 0;
  void report(int id, const std::string& name, bool ok, const std::string& detail) {
    std::cout << (ok ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << detail << std::endl;
    if (!ok) ++failed;
  }
};

void note(const std::string& s) { std::cout << "NOTE " << s << std::endl; }

std::string fmt(double x) {
  std::ostringstream ss;
  ss << std::setprecision(6) << x;
  return ss.str();
}

std::string list(const std::vector<double>& xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? " " : "") + fmt(xs[i]);
  return s + "]";
}

template <class Module>
std::vector<std::uint8_t> param_bytes(Module& m) {
  std::vector<std::uint8_t> out;
  for (const auto& nt : named_parameters(m)) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(nt.tensor->ptr());
    out.insert(out.end(), p, p + nt.tensor->size() * sizeof(double));
  }
  return out;
}

DecodeMetrics pooled_metrics(const std::vector<BenchTask>& tasks, const MainModel& main, const MTPHead& head,
                             std::size_t K) {
  DecodeMetrics m;
  for (const auto& t : tasks) m.merge(run_task(t, main, &head, K, VocabMode::full(), 1, "pooled").metrics);
  return m;
}

// ---------------------------------------------------------------------------

void criterion_lossless(Verdicts& v, const DeskArtifacts& a) {
  const auto t0 = Clock::now();
  const MainModel& main = *a.main;
  const std::size_t V = main.config.vocab_size;
  FrequencyTable pooled;
  pooled.lang = "pooled";
  for (const auto& [lang, t] : a.tables) pooled += t;
  CompressedVocab quarter = compress_vocab(pooled, V / 4, special_tokens(), V);
  CompressedVocab sixteenth = compress_vocab(pooled, V / 16, special_tokens(), V);
  quarter.attach(main.output_head());
  sixteenth.attach(main.output_head());
  const std::vector<std::pair<std::string, VocabMode>> modes = {
      {"full", VocabMode::full()}, {"25%", VocabMode::fixed_vocab(quarter)}, {"6%", VocabMode::fixed_vocab(sixteenth)}};

  std::mt19937_64 rng(4242);
  const std::size_t n_prompts = 100, max_new = 32;
  std::size_t mismatches = 0, runs = 0, accepted = 0;
  for (std::size_t i = 0; i < n_prompts; ++i) {
    TokenSequence prompt(4 + uniform_index(rng, 9));
    for (auto& t : prompt) t = static_cast<TokenId>(2 + uniform_index(rng, V - 2));
    const TokenSequence ref = baseline_decode(main, prompt, max_new, true);
    for (std::size_t K = 1; K <= 4; ++K) {
      for (const auto& [name, mode] : modes) {
        DecodeSession s(main, a.finetuned.get(), prompt, {K, max_new, mode, true});
        s.run();
        ++runs;
        accepted += s.metrics().accepted_drafts;
        if (s.output() != ref) ++mismatches;
      }
    }
  }
  const double secs = seconds_since(t0);
  v.report(1, "losslessness", mismatches == 0 && secs < 120.0,
           std::to_string(mismatches) + " mismatches over " + std::to_string(runs) + " runs (" +
               std::to_string(n_prompts) + " prompts x K 1..4 x {full, 25%, 6%}), " + std::to_string(accepted) +
               " drafts accepted, " + fmt(secs) + " s");
}

void criterion_gradients(Verdicts& v) {
  ModelConfig c;
  c.vocab_size = 16;
  c.model_dim = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq_len = 32;
  c.seed = 3;
  c.ffn_mult = 2;
  auto [main, head] = init_model(c);
  std::mt19937_64 rng(11);
  TokenSequence tokens(12);
  for (auto& t : tokens) t = static_cast<TokenId>(uniform_index(rng, 16));
  std::vector<TrainingExample> batch = {
      {TokenSequence(tokens.begin(), tokens.begin() + 3), TokenSequence(tokens.begin() + 3, tokens.end()), "x", "gc",
       false}};
  TrainConfig cfg;
  cfg.K = 3;
  auto params = parameter_list(head);
  const double err = grad_check([&] { return mtp_training_loss(main, head, batch, cfg).total; }, params, 1e-5);
  v.report(2, "gradient fidelity", err < 1e-4, "max relative error " + fmt(err) + " (d=8, V=16, T=12, K=3)");
}

void criterion_weights(Verdicts& v) {
  const auto w = step_weights(3, 0.6);
  const double ref[] = {0.510204, 0.306122, 0.183673};
  bool ok = w.size() == 3;
  double worst_ref = 0.0;
  for (std::size_t i = 0; ok && i < 3; ++i) worst_ref = std::max(worst_ref, std::abs(w[i] - ref[i]));
  // Reference values are printed to six places, so they are exact to 5e-7;
  // the closed form is checked at the 1e-9 tolerance.
  const double closed[] = {1.0 / 1.96, 0.6 / 1.96, 0.36 / 1.96};
  double worst_closed = 0.0;
  for (std::size_t i = 0; ok && i < 3; ++i) worst_closed = std::max(worst_closed, std::abs(w[i] - closed[i]));
  ok = ok && worst_ref <= 5e-7 && worst_closed < 1e-9;

  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> kd(1, 16);
  std::uniform_real_distribution<double> bd(1e-3, 1.0);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    double s = 0.0;
    for (double x : step_weights(kd(rng), bd(rng))) s += x;
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  ok = ok && worst_sum <= 1e-12;
  v.report(3, "loss weights", ok,
           "w(3, 0.6) = " + list(w) + ", |w - closed form| " + fmt(worst_closed) + ", worst |sum - 1| over 1000 draws " +
               fmt(worst_sum));
}

void criterion_recursion(Verdicts& v, const DeskArtifacts& a, const PeriodicArtifacts& p) {
  const DecodeMetrics ft = pooled_metrics(a.tasks, *a.main, *a.finetuned, 3);
  const DecodeMetrics un = pooled_metrics(a.tasks, *a.main, *a.untrained, 3);
  std::vector<double> rf, ru;
  for (std::size_t k = 1; k <= 3; ++k) {
    rf.push_back(ft.acceptance_rate(k));
    ru.push_back(un.acceptance_rate(k));
  }
  bool ok = rf[0] >= rf[1] && rf[1] >= rf[2];
  for (std::size_t k = 0; k < 3; ++k) ok = ok && rf[k] >= 2.0 * ru[k] && rf[k] > 0.0;
  ok = ok && ft.tau() - un.tau() >= 0.5;
  const double periodic_tau = run_task(p.task, *p.main, p.head.get(), 3, VocabMode::full(), 1, "periodic").row.tau;
  ok = ok && periodic_tau >= 3.8;
  v.report(4, "recursion training", ok,
           "finetuned rates " + list(rf) + " vs untrained " + list(ru) + ", tau " + fmt(ft.tau()) + " vs " +
               fmt(un.tau()) + ", periodic tau(K=3) " + fmt(periodic_tau));
  for (const auto& t : a.tasks) {
    const auto f = run_task(t, *a.main, a.finetuned.get(), 3, VocabMode::full(), 1, "f").row;
    note("task " + t.name + ": finetuned rates " + list(f.acceptance_rates) + ", tau " + fmt(f.tau));
  }
}

void criterion_depth(Verdicts& v, const DeskArtifacts& a) {
  bool ok = true;
  std::string detail;
  const std::vector<std::size_t> Ks = {0, 1, 2, 3, 4, 5, 6};
  for (const auto& t : a.tasks) {
    const DepthSweep sw = sweep_draft_depth(t, Ks, *a.main, *a.deep, a.config.training.deep_K);
    std::vector<double> taus;
    bool mono = true;
    for (const auto& r : sw.runs) {
      if (!taus.empty() && r.row.tau < taus.back()) mono = false;
      taus.push_back(r.row.tau);
    }
    // Independent brute-force maximizer of tau / (1 + K c).
    std::size_t brute = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < sw.runs.size(); ++i) {
      const double s = taus[i] / (1.0 + static_cast<double>(Ks[i]) * sw.c_draft);
      if (s > best) {
        best = s;
        brute = Ks[i];
      }
    }
    const bool interior = sw.c_draft < 0.05 || (sw.best_K >= 1 && sw.best_K <= 6);
    ok = ok && mono && interior && brute == sw.best_K;
    detail += t.name + ": tau " + list(taus) + " c_draft " + fmt(sw.c_draft) + " K* " + std::to_string(sw.best_K) +
              (brute == sw.best_K ? "" : " (brute " + std::to_string(brute) + ")") + (mono ? "" : " NOT MONOTONE") +
              "; ";
  }
  v.report(5, "K-sweep shape", ok, detail);
}

void criterion_vocab(Verdicts& v, const DeskArtifacts& a) {
  const MainModel& main = *a.main;
  const std::size_t V = main.config.vocab_size, d = main.config.model_dim;
  const std::size_t K = a.config.bench.K;
  bool ok = true;
  std::string detail;
  for (const auto& lang : {"syn-a", "syn-b"}) {
    const BenchTask& task = a.task(lang);
    const FrequencyTable& table = a.tables.at(lang);
    const std::size_t s99 =
        compress_to_coverage(table, a.config.vocab.target_coverage, special_tokens(), V).size();
    const VocabSweep sw = sweep_vocab_size(task, {s99, V}, main, *a.finetuned, K, table);
    const double full = run_task(task, main, a.finetuned.get(), K, VocabMode::full(), 1, "full").row.tau;
    const auto& cmp = sw.entries[0];
    const auto& ident = sw.entries[1];
    const double drop = full - cmp.run.row.tau;
    const bool mult = cmp.multiplies_per_step == cmp.run.row.vocab_size * d && ident.multiplies_per_step == V * d;
    ok = ok && drop <= 0.1 && ident.run.row.tau == full && mult && cmp.coverage >= a.config.vocab.target_coverage;
    detail += std::string(lang) + ": |keep| " + std::to_string(cmp.run.row.vocab_size) + " covers " +
              fmt(cmp.coverage) + ", tau " + fmt(cmp.run.row.tau) + " vs full " + fmt(full) + " (drop " + fmt(drop) +
              "), identity drop " + fmt(full - ident.run.row.tau) + ", multiplies/step " +
              std::to_string(cmp.multiplies_per_step) + " vs " + std::to_string(ident.multiplies_per_step) + "; ";
  }
  const std::size_t n = a.config.vocab.language_size;
  CompressedVocab zh = compress_vocab(a.tables.at("zh"), n, special_tokens(), V);
  CompressedVocab en = compress_vocab(a.tables.at("en"), n, special_tokens(), V);
  zh.attach(main.output_head());
  en.attach(main.output_head());
  const BenchTask& zt = a.task("zh");
  const double tz = run_task(zt, main, a.finetuned.get(), K, VocabMode::fixed_vocab(zh), 1, "zh").row.tau;
  const double te = run_task(zt, main, a.finetuned.get(), K, VocabMode::fixed_vocab(en), 1, "en").row.tau;
  ok = ok && tz > te;
  detail += "zh task at size " + std::to_string(n) + ": zh vocab tau " + fmt(tz) + " vs en vocab " + fmt(te);
  v.report(6, "vocab compression", ok, detail);
}

void criterion_metrics(Verdicts& v, const DeskArtifacts& a) {
  const MainModel& main = *a.main;
  const VocabBank bank = build_coverage_bank(a.tables, a.config.vocab.target_coverage, main);
  const BenchModels models{&main, a.vanilla.get(), a.finetuned.get(), &bank};
  const std::size_t K = a.config.bench.K;
  const std::vector<RunConfig> runs = {{Method::Baseline, 0, 1},
                                       {Method::VanillaHead, K, 1},
                                       {Method::FinetunedHead, K, 1},
                                       {Method::FinetunedHeadFR, K, 1}};
  const auto results = run_benchmark(a.tasks, runs, models);
  const auto dir = std::filesystem::temp_directory_path() / "mtpdraft_acceptance";
  std::filesystem::create_directories(dir);
  double worst = 0.0;
  bool baseline_exact = true;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    const auto path = dir / ("run" + std::to_string(i) + ".jsonl");
    write_round_log(path, r.log);
    const LogReplay replay = replay_round_log(read_round_log(path));
    worst = std::max(worst, std::abs(replay.tau() - r.row.tau));
    if (r.row.method == "baseline" && r.row.tau != 1.0) baseline_exact = false;
  }
  std::filesystem::remove_all(dir);
  v.report(7, "metric self-consistency", worst <= 1e-9 && baseline_exact,
           std::to_string(results.size()) + " runs, worst |tau_log - tau_reported| " + fmt(worst) +
               (baseline_exact ? ", baseline tau = 1 on every task" : ", baseline tau != 1"));

  // Method comparison per task, for the record.
  for (std::size_t i = 0; i < results.size(); i += runs.size()) {
    const auto& van = results[i + 1].row;
    const auto& ft = results[i + 2].row;
    const auto& fr = results[i + 3].row;
    note("task " + ft.task + " K=" + std::to_string(K) + ": vanilla tau " + fmt(van.tau) + ", finetuned " +
         fmt(ft.tau) + ", finetuned+FR " + fmt(fr.tau) + " (|keep| " + std::to_string(fr.vocab_size) + ")" +
         (ft.tau > van.tau ? "" : "; finetuned does not beat vanilla here"));
  }
}

void criterion_frozen(Verdicts& v, const DeskArtifacts& a) {
  MainModel main = *a.main;
  const auto before = param_bytes(main);
  const std::size_t n = std::min<std::size_t>(64, a.dedup.kept.size());
  TrainConfig tc = a.config.training.head;
  tc.epochs = 1;
  const HeadTrainResult r = train_mtp_head(std::span(a.dedup.kept.data(), n), main, *a.untrained, tc);
  const bool same = param_bytes(main) == before;
  MTPHead h0 = *a.untrained, h1 = r.head;
  const bool head_moved = param_bytes(h0) != param_bytes(h1);
  v.report(8, "frozen backbone", same && head_moved,
           std::string(same ? "main parameters byte-identical" : "main parameters changed") + " after " +
               std::to_string(r.history.size()) + " head steps" + (head_moved ? "" : " (head did not move)"));
}

TrainingExample ex(TokenSequence prompt, TokenSequence response) {
  return {std::move(prompt), std::move(response), "x", "acc", false};
}

void criterion_dedup(Verdicts& v) {
  bool ok = true;
  std::string detail;
  const std::vector<TrainingExample> dup = {ex({5, 6, 7}, {8, 9, 10, 11, 12}), ex({5, 6, 7}, {8, 9, 10, 11, 12})};
  const std::vector<TrainingExample> disjoint = {ex({2, 3, 4}, {5, 6, 7, 8, 9}),
                                                 ex({202, 203, 204}, {205, 206, 207, 208, 209})};
  for (double th : {0.05, 0.3, 0.5, 0.8, 0.99}) {
    DedupConfig cfg;
    cfg.jaccard_threshold = th;
    ok = ok && dedup_and_filter(dup, cfg).kept.size() == 1 && dedup_and_filter(disjoint, cfg).kept.size() == 2;
  }
  DedupConfig one;
  one.jaccard_threshold = 1.0;
  ok = ok && dedup_and_filter(dup, one).kept.size() == 1;
  detail += "duplicates collapse and disjoint pairs survive at thresholds {0.05..0.99}; ";
  TokenSequence rep;
  for (int i = 0; i < 50; ++i) rep.insert(rep.end(), {20, 21, 22, 23});
  const auto out = dedup_and_filter(std::vector<TrainingExample>{ex({2, 3}, rep)}, DedupConfig{});
  ok = ok && out.kept.empty() && out.repetitive == 1;
  detail += "4-gram x 50 ratio " + fmt(repetition_ratio(rep, 4)) + ", removed " + std::to_string(out.repetitive);
  v.report(9, "dedup/filter", ok, detail);
}

void examples(const DeskArtifacts& a) {
  const auto& m = a.finetuned_training.final_epoch_means;
  note("final-epoch step losses (K=" + std::to_string(m.size()) + " head) " + list(m) +
       (std::is_sorted(m.begin(), m.end()) ? "" : "; not nondecreasing in k"));
  for (const auto& t : a.tasks) {
    const auto v2 = run_task(t, *a.main, a.vanilla.get(), 2, VocabMode::full(), 1, "v").row.tau;
    const auto v4 = run_task(t, *a.main, a.vanilla.get(), 4, VocabMode::full(), 1, "v").row.tau;
    const auto f2 = run_task(t, *a.main, a.finetuned.get(), 2, VocabMode::full(), 1, "f").row.tau;
    const auto f4 = run_task(t, *a.main, a.finetuned.get(), 4, VocabMode::full(), 1, "f").row.tau;
    note("task " + t.name + " tau K=2 -> 4: vanilla " + fmt(v2) + " -> " + fmt(v4) + ", finetuned " + fmt(f2) +
         " -> " + fmt(f4));
  }
}

}  // namespace

int main(int argc, char** argv) {
  DeskConfig cfg;
  if (argc > 1) cfg = load_desk_config(argv[1]);
  const auto t0 = Clock::now();
  Verdicts v;

  criterion_gradients(v);
  criterion_weights(v);
  criterion_dedup(v);

  const PeriodicArtifacts periodic = run_periodic_pipeline(cfg.periodic);
  note("periodic pipeline ready at " + fmt(seconds_since(t0)) + " s");
  const DeskArtifacts a = run_desk_pipeline(cfg, [&](const std::string& s) {
    note(s + " at " + fmt(seconds_since(t0)) + " s");
  });

  criterion_lossless(v, a);
  criterion_recursion(v, a, periodic);
  criterion_depth(v, a);
  criterion_vocab(v, a);
  criterion_metrics(v, a);
  criterion_frozen(v, a);
  examples(a);

  note("total " + fmt(seconds_since(t0)) + " s, " + std::to_string(v.failed) + " criteria failed");
  return v.failed;
}
