// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line driver. Each stage reads and writes files under --out-dir so
// stages can be run one at a time:
//   pretrain-main -> main.ckpt
//   distill       -> distilled.jsonl
//   dedup         -> train.jsonl
//   train-head    -> head-<name>.ckpt, head-<name>-losses.json
//   build-vocab   -> freq-<lang>.json, vocab-<lang>-<size>.json
//   bench / sweep-k / sweep-vocab -> CSV + JSON reports, JSONL round logs

#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mtpdraft/mtpdraft.hpp"

namespace fs = std::filesystem;
using namespace mtpdraft;

namespace {

struct Globals {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir = "out";
};

DeskConfig load_config(const Globals& g) {
  DeskConfig c = g.config.empty() ? DeskConfig{} : load_desk_config(g.config);
  if (g.seed_set) {
    c.corpus.seed = g.seed;
    c.model.seed = g.seed;
    c.training.pretrain.seed = g.seed;
    c.training.head.seed = g.seed;
    c.training.distill.generation.seed = g.seed;
    c.bench.seed = g.seed;
  }
  return c;
}

fs::path out(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

void log(const std::string& s) { std::cerr << s << "\n"; }

void emit_both(const std::vector<ReportRow>& rows, const Globals& g, const std::string& stem) {
  emit_report(rows, ReportFormat::Csv, out(g, stem + ".csv"));
  emit_report(rows, ReportFormat::Json, out(g, stem + ".json"));
  std::cout << report_csv(rows);
}

std::vector<BenchTask> select_tasks(const DeskCorpus& corpus, const DeskConfig& cfg, const std::string& name) {
  auto tasks = make_bench_tasks(corpus, cfg.bench);
  if (name.empty()) return tasks;
  for (auto& t : tasks) {
    if (t.name == name) return {t};
  }
  throw ConfigError("no bench task named '" + name + "'");
}

void cmd_pretrain(const Globals& g) {
  const DeskConfig cfg = load_config(g);
  const DeskCorpus corpus = build_desk_corpus(cfg);
  const auto seqs = corpus.all_sequences();
  log("pretraining on " + std::to_string(seqs.size()) + " documents");
  const PretrainResult r = pretrain_main(seqs, cfg.model, cfg.training.pretrain);
  save_main(r.model, out(g, "main.ckpt"));
  write_json_file(out(g, "pretrain_losses.json"), nlohmann::json(r.losses));
  log("final loss " + format_number(r.losses.empty() ? std::nan("") : r.losses.back()));
}

void cmd_distill(const Globals& g) {
  const DeskConfig cfg = load_config(g);
  const DeskCorpus corpus = build_desk_corpus(cfg);
  const MainModel main = load_main(out(g, "main.ckpt"));
  const auto& ds = cfg.training.distill;
  std::mt19937_64 rng(ds.generation.seed);
  std::vector<Prompt> prompts;
  for (const auto& [lang, docs] : corpus.by_lang) {
    auto p = make_prompts(corpus, lang, ds.prompts_per_language, ds.prompt_min, ds.prompt_max, rng);
    prompts.insert(prompts.end(), p.begin(), p.end());
  }
  const auto data = self_distill(prompts, main, ds.generation);
  write_dataset(out(g, "distilled.jsonl"), data);
  log("distilled " + std::to_string(data.size()) + " examples");
}

void cmd_dedup(const Globals& g, const std::string& input) {
  const DeskConfig cfg = load_config(g);
  const auto data = read_dataset(input.empty() ? out(g, "distilled.jsonl") : fs::path(input));
  const DedupReport r = dedup_and_filter(data, cfg.training.distill.dedup);
  write_dataset(out(g, "train.jsonl"), r.kept);
  std::cout << "kept " << r.kept.size() << " of " << data.size() << " (duplicates " << r.duplicates
            << ", out of length " << r.out_of_length << ", repetitive " << r.repetitive << ", truncated "
            << r.truncated << ")\n";
}

void cmd_train_head(const Globals& g, std::size_t K, std::size_t epochs, const std::string& name) {
  const DeskConfig cfg = load_config(g);
  const MainModel main = load_main(out(g, "main.ckpt"));
  const auto data = read_dataset(out(g, "train.jsonl"));
  TrainConfig tc = cfg.training.head;
  if (K) tc.K = K;
  if (epochs) tc.epochs = epochs;
  const std::size_t every = std::max<std::size_t>(1, data.size() / tc.batch_size / 4);
  std::size_t step = 0;
  const HeadTrainResult r =
      train_mtp_head(data, main, init_head(main.config, main.config.seed), tc, [&](const LossReport& rep) {
        if (++step % every == 0) log(detail::loss_diagnostic(rep));
      });
  save_head(r.head, out(g, "head-" + name + ".ckpt"));
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& h : r.history) steps.push_back({{"total", h.total}, {"step_losses", h.step_losses}});
  write_json_file(out(g, "head-" + name + "-losses.json"),
                  {{"K", tc.K}, {"final_epoch_means", r.final_epoch_means}, {"history", steps}});
  std::cout << "final-epoch step losses:";
  for (double x : r.final_epoch_means) std::cout << " " << format_number(x);
  std::cout << "\n";
}

void cmd_build_vocab(const Globals& g, const std::string& lang, std::size_t size) {
  const DeskConfig cfg = load_config(g);
  const DeskCorpus corpus = build_desk_corpus(cfg);
  const auto seqs = corpus.sequences(lang);
  if (seqs.empty()) throw ConfigError("no corpus for language '" + lang + "'");
  const FrequencyTable table = build_frequency_table(seqs, lang);
  const CompressedVocab cv = compress_vocab(table, size, special_tokens(), cfg.model.vocab_size);
  write_json_file(out(g, "freq-" + lang + ".json"), frequency_table_json(table));
  write_json_file(out(g, "vocab-" + lang + "-" + std::to_string(size) + ".json"), compressed_vocab_json(cv));
  std::cout << lang << ": " << cv.size() << " tokens cover " << format_number(coverage(table, cv.keep()))
            << " of occurrences\n";
}

void write_logs(const std::vector<BenchRun>& runs, const Globals& g, const std::string& stem) {
  for (const auto& r : runs) {
    std::string m = r.row.method;
    for (auto& c : m) c = c == '+' ? '_' : c;
    write_round_log(out(g, stem + "-" + r.row.task + "-" + m + "-K" + std::to_string(r.row.K) + "-V" +
                               std::to_string(r.row.vocab_size) + ".jsonl"),
                    r.log);
  }
}

void cmd_bench(const Globals& g, std::size_t K, const std::string& task) {
  const DeskConfig cfg = load_config(g);
  const DeskCorpus corpus = build_desk_corpus(cfg);
  const MainModel main = load_main(out(g, "main.ckpt"));
  const MTPHead finetuned = load_head(out(g, "head-finetuned.ckpt"));
  std::unique_ptr<MTPHead> vanilla;
  if (fs::exists(out(g, "head-vanilla.ckpt"))) vanilla = std::make_unique<MTPHead>(load_head(out(g, "head-vanilla.ckpt")));
  const VocabBank bank = build_coverage_bank(build_frequency_tables(corpus), cfg.vocab.target_coverage, main);
  const std::size_t k = K ? K : cfg.bench.K;
  std::vector<RunConfig> runs = {{Method::Baseline, 0, cfg.bench.repetitions}};
  if (vanilla) runs.push_back({Method::VanillaHead, k, cfg.bench.repetitions});
  runs.push_back({Method::FinetunedHead, k, cfg.bench.repetitions});
  runs.push_back({Method::FinetunedHeadFR, k, cfg.bench.repetitions});
  const auto results = run_benchmark(select_tasks(corpus, cfg, task), runs, {&main, vanilla.get(), &finetuned, &bank});
  write_logs(results, g, "rounds");
  emit_both(rows_of(results), g, "bench");
}

void cmd_sweep_k(const Globals& g, std::size_t max_K, const std::string& head_name, std::size_t trained,
                 const std::string& task) {
  const DeskConfig cfg = load_config(g);
  const DeskCorpus corpus = build_desk_corpus(cfg);
  const MainModel main = load_main(out(g, "main.ckpt"));
  const MTPHead head = load_head(out(g, "head-" + head_name + ".ckpt"));
  std::vector<std::size_t> Ks;
  for (std::size_t k = 0; k <= (max_K ? max_K : cfg.bench.max_K); ++k) Ks.push_back(k);
  std::vector<ReportRow> rows;
  for (const auto& t : select_tasks(corpus, cfg, task)) {
    const DepthSweep sw = sweep_draft_depth(t, Ks, main, head, trained ? trained : cfg.training.head.K, head_name,
                                            cfg.bench.repetitions);
    for (const auto& w : sw.warnings) log("warning: " + t.name + ": " + w);
    log(t.name + ": best K " + std::to_string(sw.best_K) + " at c_draft " + format_number(sw.c_draft));
    for (const auto& r : sw.runs) rows.push_back(r.row);
  }
  emit_both(rows, g, "sweep-k");
}

void cmd_sweep_vocab(const Globals& g, std::vector<std::size_t> sizes, std::size_t K, const std::string& task) {
  const DeskConfig cfg = load_config(g);
  const DeskCorpus corpus = build_desk_corpus(cfg);
  const MainModel main = load_main(out(g, "main.ckpt"));
  const MTPHead head = load_head(out(g, "head-finetuned.ckpt"));
  const auto tables = build_frequency_tables(corpus);
  if (sizes.empty()) {
    for (double f : cfg.vocab.fractions) sizes.push_back(static_cast<std::size_t>(f * static_cast<double>(cfg.model.vocab_size)));
    sizes.push_back(cfg.model.vocab_size);
  }
  std::vector<ReportRow> rows;
  for (const auto& t : select_tasks(corpus, cfg, task)) {
    const VocabSweep sw = sweep_vocab_size(t, sizes, main, head, K ? K : cfg.bench.K, tables.at(t.lang),
                                           cfg.bench.repetitions);
    for (const auto& w : sw.warnings) log("warning: " + t.name + ": " + w);
    for (const auto& e : sw.entries) {
      log(t.name + ": size " + std::to_string(e.run.row.vocab_size) + " coverage " + format_number(e.coverage) +
          " multiplies/step " + std::to_string(e.multiplies_per_step));
      rows.push_back(e.run.row);
    }
  }
  emit_both(rows, g, "sweep-vocab");
}

void cmd_report(const Globals& g, const std::vector<std::string>& inputs, const std::string& format,
                const std::string& name) {
  std::vector<ReportRow> rows;
  for (const auto& in : inputs) {
    auto r = load_report(in);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (format == "csv" || format == "both") emit_report(rows, ReportFormat::Csv, out(g, name + ".csv"));
  if (format == "json" || format == "both") emit_report(rows, ReportFormat::Json, out(g, name + ".json"));
  std::cout << report_csv(rows);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-token-prediction drafting: training, speculative decoding and benchmarks"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option_function<std::uint64_t>(
      "--seed", [&](std::uint64_t s) { g.seed = s, g.seed_set = true; }, "Override every RNG seed");
  app.add_option("--out-dir", g.out_dir, "Directory for artifacts and reports")->capture_default_str();

  auto* pre = app.add_subcommand("pretrain-main", "Pretrain the backbone on the desk corpus");
  auto* dis = app.add_subcommand("distill", "Generate self-distilled responses");
  auto* ded = app.add_subcommand("dedup", "MinHash de-duplication and heuristic filters");
  std::string dedup_in;
  ded->add_option("--input", dedup_in, "Dataset (default: distilled.jsonl in --out-dir)");

  auto* th = app.add_subcommand("train-head", "Train the shared MTP head on the frozen backbone");
  std::size_t head_K = 0, head_epochs = 0;
  std::string head_name = "finetuned";
  th->add_option("--K", head_K, "Recursive steps (default from config)");
  th->add_option("--epochs", head_epochs, "Epochs (default from config)");
  th->add_option("--name", head_name, "Checkpoint name, e.g. finetuned or vanilla")->capture_default_str();

  auto* bv = app.add_subcommand("build-vocab", "Frequency table and compressed vocabulary for one language");
  std::string lang;
  std::size_t size = 0;
  bv->add_option("--lang", lang, "Language tag")->required();
  bv->add_option("--size", size, "Kept tokens")->required()->check(CLI::PositiveNumber);

  std::string task;
  auto* be = app.add_subcommand("bench", "Compare baseline, vanilla, finetuned and finetuned+FR");
  std::size_t bench_K = 0;
  be->add_option("--K", bench_K, "Draft depth (default from config)");
  be->add_option("--task", task, "Single task (default: all)");

  auto* sk = app.add_subcommand("sweep-k", "Draft-depth sweep");
  std::size_t max_K = 0, trained = 0;
  std::string sweep_head = "finetuned";
  sk->add_option("--max-K", max_K, "Largest K (default from config)");
  sk->add_option("--head", sweep_head, "Head checkpoint name")->capture_default_str();
  sk->add_option("--trained-depth", trained, "K the head was trained with (for warnings)");
  sk->add_option("--task", task, "Single task (default: all)");

  auto* sv = app.add_subcommand("sweep-vocab", "Compressed-vocabulary size sweep");
  std::vector<std::size_t> sizes;
  std::size_t vocab_K = 0;
  sv->add_option("--sizes", sizes, "Vocabulary sizes (default from config)");
  sv->add_option("--K", vocab_K, "Draft depth (default from config)");
  sv->add_option("--task", task, "Single task (default: all)");

  auto* rp = app.add_subcommand("report", "Merge and convert CSV/JSON reports");
  std::vector<std::string> inputs;
  std::string format = "both", name = "report";
  rp->add_option("inputs", inputs, "Report files")->required()->check(CLI::ExistingFile);
  rp->add_option("--format", format, "csv, json or both")->check(CLI::IsMember({"csv", "json", "both"}));
  rp->add_option("--name", name, "Output stem")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pre) cmd_pretrain(g);
    if (*dis) cmd_distill(g);
    if (*ded) cmd_dedup(g, dedup_in);
    if (*th) cmd_train_head(g, head_K, head_epochs, head_name);
    if (*bv) cmd_build_vocab(g, lang, size);
    if (*be) cmd_bench(g, bench_K, task);
    if (*sk) cmd_sweep_k(g, max_K, sweep_head, trained, task);
    if (*sv) cmd_sweep_vocab(g, sizes, vocab_K, task);
    if (*rp) cmd_report(g, inputs, format, name);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
