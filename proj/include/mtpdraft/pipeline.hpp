// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// End-to-end desk flow: corpus -> pretrained backbone -> self-distilled,
// de-duplicated data -> trained heads -> per-language vocabularies -> tasks.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtpdraft/bench.hpp"
#include "mtpdraft/checkpoint.hpp"
#include "mtpdraft/corpus.hpp"
#include "mtpdraft/distill.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/training.hpp"
#include "mtpdraft/vocab.hpp"

#ifndef MTPDRAFT_DATA_DIR
#define MTPDRAFT_DATA_DIR "data"
#endif

namespace mtpdraft {

struct TextSource {
  std::string lang;
  std::string file;  // relative to data_dir unless absolute
};

struct CorpusSection {
  std::vector<SyntheticLanguageConfig> languages = {
      {"syn-a", 512, 11, 4, 0.4, 0.15, 1.0, 1, 4},
      {"syn-b", 512, 22, 4, 0.4, 0.15, 1.0, 1, 4},
  };
  std::size_t docs_per_language = 240;
  std::size_t doc_length = 64;
  std::vector<TextSource> texts = {{"en", "en.txt"}, {"zh", "zh.txt"}};
  std::string data_dir = MTPDRAFT_DATA_DIR;
  std::size_t text_window = 64;
  std::uint64_t seed = 7;
};

struct DistillSection {
  std::size_t prompts_per_language = 160;
  std::size_t prompt_min = 8;
  std::size_t prompt_max = 16;
  GenerationConfig generation{{0.6, 20, 0.95}, 48, 101, true};
  DedupConfig dedup{};
};

struct TrainingSection {
  PretrainConfig pretrain{3e-3, 0.05, 6, 8, 5, 0.9, 0.95, 1e-8, 0.0, 1.0};
  TrainConfig head{3, 0.6, 3e-3, 0.05, 6, 8, 0, 0.9, 0.95, 1e-8, 0.0, 1.0, true};
  std::size_t vanilla_K = 1;
  std::size_t deep_K = 6;
  DistillSection distill;
};

struct VocabSection {
  double target_coverage = 0.99;
  std::vector<double> fractions = {0.25, 0.0625};  // of |V|, for the lossless sweep
  std::size_t language_size = 96;                  // equal-size zh/en comparison
};

struct BenchSection {
  std::size_t prompts_per_task = 16;
  std::size_t prompt_length = 12;
  std::size_t max_new_tokens = 48;
  std::size_t K = 3;
  std::size_t max_K = 6;
  std::size_t repetitions = 1;
  std::uint64_t seed = 2024;
};

struct PeriodicSection {
  PeriodicLanguageConfig language{};
  ModelConfig model{16, 16, 1, 2, 64, 10000.0, 1e-6, 3, 4};
  PretrainConfig pretrain{1e-2, 0.05, 8, 8, 9, 0.9, 0.95, 1e-8, 0.0, 1.0};
  TrainConfig head{3, 0.6, 1e-2, 0.05, 40, 8, 9, 0.9, 0.95, 1e-8, 0.0, 1.0, true};
  std::size_t docs = 64;
  std::size_t doc_length = 48;
  std::size_t prompts = 16;
  std::size_t prompt_length = 6;
  std::size_t max_new_tokens = 41;
};

struct DeskConfig {
  ModelConfig model{512, 64, 2, 4, 128, 10000.0, 1e-6, 1, 4};
  CorpusSection corpus;
  TrainingSection training;
  VocabSection vocab;
  BenchSection bench;
  PeriodicSection periodic;
};

// ---------------------------------------------------------------------------
// JSON config. Every key is optional; missing keys keep the defaults above.

namespace detail {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_model(const nlohmann::json& j, ModelConfig& c) {
  read_opt(j, "vocab_size", c.vocab_size);
  read_opt(j, "model_dim", c.model_dim);
  read_opt(j, "n_layers", c.n_layers);
  read_opt(j, "n_heads", c.n_heads);
  read_opt(j, "max_seq_len", c.max_seq_len);
  read_opt(j, "rope_base", c.rope_base);
  read_opt(j, "rms_eps", c.rms_eps);
  read_opt(j, "seed", c.seed);
  read_opt(j, "ffn_mult", c.ffn_mult);
}

inline void read_pretrain(const nlohmann::json& j, PretrainConfig& c) {
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "warmup_ratio", c.warmup_ratio);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "seed", c.seed);
  read_opt(j, "adam_beta1", c.adam_beta1);
  read_opt(j, "adam_beta2", c.adam_beta2);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "grad_clip", c.grad_clip);
}

inline void read_train(const nlohmann::json& j, TrainConfig& c) {
  read_opt(j, "K", c.K);
  read_opt(j, "beta", c.beta);
  read_opt(j, "learning_rate", c.learning_rate);
  read_opt(j, "warmup_ratio", c.warmup_ratio);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "seed", c.seed);
  read_opt(j, "adam_beta1", c.adam_beta1);
  read_opt(j, "adam_beta2", c.adam_beta2);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "grad_clip", c.grad_clip);
  read_opt(j, "response_only", c.response_only);
}

}  // namespace detail

inline DeskConfig desk_config_from_json(const nlohmann::json& j) {
  DeskConfig c;
  if (j.contains("model")) detail::read_model(j.at("model"), c.model);
  for (auto& l : c.corpus.languages) l.vocab_size = c.model.vocab_size;
  if (j.contains("training")) {
    const auto& t = j.at("training");
    if (t.contains("pretrain")) detail::read_pretrain(t.at("pretrain"), c.training.pretrain);
    if (t.contains("head")) detail::read_train(t.at("head"), c.training.head);
    detail::read_opt(t, "vanilla_K", c.training.vanilla_K);
    detail::read_opt(t, "deep_K", c.training.deep_K);
    if (t.contains("corpus")) {
      const auto& cc = t.at("corpus");
      detail::read_opt(cc, "docs_per_language", c.corpus.docs_per_language);
      detail::read_opt(cc, "doc_length", c.corpus.doc_length);
      detail::read_opt(cc, "data_dir", c.corpus.data_dir);
      detail::read_opt(cc, "text_window", c.corpus.text_window);
      detail::read_opt(cc, "seed", c.corpus.seed);
      if (cc.contains("languages")) {
        c.corpus.languages.clear();
        for (const auto& e : cc.at("languages")) {
          SyntheticLanguageConfig l;
          detail::read_opt(e, "tag", l.tag);
          detail::read_opt(e, "seed", l.seed);
          detail::read_opt(e, "successors", l.successors);
          detail::read_opt(e, "successor_decay", l.successor_decay);
          detail::read_opt(e, "restart", l.restart);
          detail::read_opt(e, "zipf_exponent", l.zipf_exponent);
          detail::read_opt(e, "context_classes", l.context_classes);
          detail::read_opt(e, "modes", l.modes);
          l.vocab_size = c.model.vocab_size;
          c.corpus.languages.push_back(l);
        }
      }
      if (cc.contains("texts")) {
        c.corpus.texts.clear();
        for (const auto& e : cc.at("texts")) c.corpus.texts.push_back({e.at("lang"), e.at("file")});
      }
    }
    if (t.contains("distill")) {
      const auto& d = t.at("distill");
      auto& s = c.training.distill;
      detail::read_opt(d, "prompts_per_language", s.prompts_per_language);
      detail::read_opt(d, "prompt_min", s.prompt_min);
      detail::read_opt(d, "prompt_max", s.prompt_max);
      detail::read_opt(d, "temperature", s.generation.sampling.temperature);
      detail::read_opt(d, "top_k", s.generation.sampling.top_k);
      detail::read_opt(d, "top_p", s.generation.sampling.top_p);
      detail::read_opt(d, "max_new_tokens", s.generation.max_new_tokens);
      detail::read_opt(d, "seed", s.generation.seed);
      detail::read_opt(d, "jaccard_threshold", s.dedup.jaccard_threshold);
      detail::read_opt(d, "shingle_width", s.dedup.shingle_width);
      detail::read_opt(d, "num_hashes", s.dedup.num_hashes);
      detail::read_opt(d, "repetition_bound", s.dedup.repetition_bound);
    }
  }
  if (j.contains("vocab")) {
    const auto& v = j.at("vocab");
    detail::read_opt(v, "target_coverage", c.vocab.target_coverage);
    detail::read_opt(v, "fractions", c.vocab.fractions);
    detail::read_opt(v, "language_size", c.vocab.language_size);
  }
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    detail::read_opt(b, "prompts_per_task", c.bench.prompts_per_task);
    detail::read_opt(b, "prompt_length", c.bench.prompt_length);
    detail::read_opt(b, "max_new_tokens", c.bench.max_new_tokens);
    detail::read_opt(b, "K", c.bench.K);
    detail::read_opt(b, "max_K", c.bench.max_K);
    detail::read_opt(b, "repetitions", c.bench.repetitions);
    detail::read_opt(b, "seed", c.bench.seed);
  }
  return c;
}

inline DeskConfig load_desk_config(const std::filesystem::path& path) {
  return desk_config_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Stages.

struct DeskCorpus {
  std::vector<SyntheticLanguage> languages;
  std::map<std::string, std::vector<Document>> by_lang;  // training documents per language tag

  std::vector<TokenSequence> all_sequences() const {
    std::vector<TokenSequence> out;
    for (const auto& [lang, docs] : by_lang) {
      for (const auto& d : docs) out.push_back(d.tokens);
    }
    return out;
  }

  std::vector<TokenSequence> sequences(const std::string& lang) const {
    std::vector<TokenSequence> out;
    auto it = by_lang.find(lang);
    if (it == by_lang.end()) return out;
    for (const auto& d : it->second) out.push_back(d.tokens);
    return out;
  }

  const SyntheticLanguage* language(const std::string& tag) const {
    for (const auto& l : languages) {
      if (l.tag() == tag) return &l;
    }
    return nullptr;
  }
};

inline std::filesystem::path resolve_data_path(const CorpusSection& c, const std::string& file) {
  std::filesystem::path p(file);
  return p.is_absolute() ? p : std::filesystem::path(c.data_dir) / p;
}

inline DeskCorpus build_desk_corpus(const DeskConfig& cfg) {
  DeskCorpus corpus;
  std::mt19937_64 rng(cfg.corpus.seed);
  for (auto lc : cfg.corpus.languages) {
    lc.vocab_size = cfg.model.vocab_size;
    corpus.languages.emplace_back(lc);
    auto& docs = corpus.by_lang[lc.tag];
    for (std::size_t i = 0; i < cfg.corpus.docs_per_language; ++i) {
      docs.push_back({corpus.languages.back().generate(cfg.corpus.doc_length, rng), lc.tag, "synthetic"});
    }
  }
  for (const auto& t : cfg.corpus.texts) {
    const auto text = read_text_file(resolve_data_path(cfg.corpus, t.file));
    corpus.by_lang[t.lang] = text_documents(text, t.lang, t.file, cfg.corpus.text_window, 16);
    if (corpus.by_lang[t.lang].empty()) throw ConfigError("text corpus " + t.file + " yields no documents");
  }
  return corpus;
}

// Prompts drawn from fresh samples of each language (synthetic) or random
// windows of the text documents.
inline std::vector<Prompt> make_prompts(const DeskCorpus& corpus, const std::string& lang, std::size_t count,
                                        std::size_t min_len, std::size_t max_len, std::mt19937_64& rng) {
  std::vector<Prompt> out;
  const SyntheticLanguage* syn = corpus.language(lang);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = min_len + uniform_index(rng, max_len - min_len + 1);
    if (syn) {
      out.push_back({syn->generate(len, rng), lang, "synthetic"});
    } else {
      out.push_back({text_prompt(corpus.by_lang.at(lang), len, rng), lang, "text"});
    }
  }
  return out;
}

inline std::map<std::string, FrequencyTable> build_frequency_tables(const DeskCorpus& corpus) {
  std::map<std::string, FrequencyTable> out;
  for (const auto& [lang, docs] : corpus.by_lang) out.emplace(lang, build_frequency_table(corpus.sequences(lang), lang));
  return out;
}

// One compressed vocabulary per language, each of `size` entries.
inline VocabBank build_vocab_bank(const std::map<std::string, FrequencyTable>& tables, std::size_t size,
                                  const MainModel& main) {
  VocabBank bank;
  for (const auto& [lang, t] : tables) bank.add(compress_vocab(t, size, special_tokens(), main.config.vocab_size));
  bank.attach(main.output_head());
  return bank;
}

// Per-language vocabularies sized to reach `coverage` of their own table.
inline VocabBank build_coverage_bank(const std::map<std::string, FrequencyTable>& tables, double target,
                                     const MainModel& main) {
  VocabBank bank;
  for (const auto& [lang, t] : tables) bank.add(compress_to_coverage(t, target, special_tokens(), main.config.vocab_size));
  bank.attach(main.output_head());
  return bank;
}

inline std::vector<BenchTask> make_bench_tasks(const DeskCorpus& corpus, const BenchSection& b) {
  std::vector<BenchTask> tasks;
  std::mt19937_64 rng(b.seed);
  for (const auto& [lang, docs] : corpus.by_lang) {
    BenchTask t;
    t.name = lang;
    t.lang = lang;
    t.max_new_tokens = b.max_new_tokens;
    t.detect_language = corpus.language(lang) == nullptr;
    for (auto& p : make_prompts(corpus, lang, b.prompts_per_task, b.prompt_length, b.prompt_length, rng)) {
      t.prompts.push_back(std::move(p.tokens));
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

using StageLog = std::function<void(const std::string&)>;

// Everything the benchmarks and acceptance checks consume. Heap-allocated
// pieces keep stable addresses for the vocabulary views.
struct DeskArtifacts {
  DeskConfig config;
  DeskCorpus corpus;
  std::unique_ptr<MainModel> main;
  std::unique_ptr<MTPHead> untrained;
  std::unique_ptr<MTPHead> vanilla;    // trained with K = vanilla_K
  std::unique_ptr<MTPHead> finetuned;  // trained with the configured K
  std::unique_ptr<MTPHead> deep;       // trained with K = deep_K for depth sweeps
  std::vector<TrainingExample> distilled;
  DedupReport dedup;
  HeadTrainResult finetuned_training;
  std::map<std::string, FrequencyTable> tables;
  std::vector<BenchTask> tasks;
  std::vector<double> pretrain_losses;

  const BenchTask& task(const std::string& name) const {
    for (const auto& t : tasks) {
      if (t.name == name) return t;
    }
    throw ConfigError("no bench task named '" + name + "'");
  }
};

inline MTPHead train_head_with_depth(const DeskArtifacts& a, std::size_t K, HeadTrainResult* result = nullptr) {
  TrainConfig tc = a.config.training.head;
  tc.K = K;
  HeadTrainResult r = train_mtp_head(a.dedup.kept, *a.main, *a.untrained, tc);
  MTPHead h = r.head;
  if (result) *result = std::move(r);
  return h;
}

inline DeskArtifacts run_desk_pipeline(const DeskConfig& cfg, const StageLog& log = {}) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  DeskArtifacts a;
  a.config = cfg;
  a.corpus = build_desk_corpus(cfg);
  say("corpus built");

  const auto seqs = a.corpus.all_sequences();
  PretrainResult pr = pretrain_main(seqs, cfg.model, cfg.training.pretrain);
  a.main = std::make_unique<MainModel>(std::move(pr.model));
  a.pretrain_losses = std::move(pr.losses);
  say("main model pretrained, final loss " + format_number(a.pretrain_losses.back()));

  const auto& ds = cfg.training.distill;
  std::mt19937_64 rng(ds.generation.seed);
  std::vector<Prompt> prompts;
  for (const auto& [lang, docs] : a.corpus.by_lang) {
    auto p = make_prompts(a.corpus, lang, ds.prompts_per_language, ds.prompt_min, ds.prompt_max, rng);
    prompts.insert(prompts.end(), p.begin(), p.end());
  }
  a.distilled = self_distill(prompts, *a.main, ds.generation);
  a.dedup = dedup_and_filter(a.distilled, ds.dedup);
  say("distilled " + std::to_string(a.distilled.size()) + " examples, kept " + std::to_string(a.dedup.kept.size()));

  a.untrained = std::make_unique<MTPHead>(init_head(cfg.model, cfg.model.seed));
  a.finetuned = std::make_unique<MTPHead>(train_head_with_depth(a, cfg.training.head.K, &a.finetuned_training));
  say("head trained (K=" + std::to_string(cfg.training.head.K) + ")");
  a.vanilla = std::make_unique<MTPHead>(train_head_with_depth(a, cfg.training.vanilla_K));
  say("head trained (K=" + std::to_string(cfg.training.vanilla_K) + ")");
  a.deep = std::make_unique<MTPHead>(train_head_with_depth(a, cfg.training.deep_K));
  say("head trained (K=" + std::to_string(cfg.training.deep_K) + ")");

  a.tables = build_frequency_tables(a.corpus);
  a.tasks = make_bench_tasks(a.corpus, cfg.bench);
  return a;
}

// The period-p toy: backbone, trained head and the language itself.
struct PeriodicArtifacts {
  PeriodicLanguage language{PeriodicLanguageConfig{}};
  std::unique_ptr<MainModel> main;
  std::unique_ptr<MTPHead> head;
  HeadTrainResult training;
  BenchTask task;
};

inline PeriodicArtifacts run_periodic_pipeline(const PeriodicSection& cfg) {
  PeriodicArtifacts a;
  PeriodicLanguageConfig lc = cfg.language;
  lc.vocab_size = cfg.model.vocab_size;
  a.language = PeriodicLanguage(lc);
  std::mt19937_64 rng(cfg.model.seed);
  std::vector<TokenSequence> docs;
  for (std::size_t i = 0; i < cfg.docs; ++i) docs.push_back(a.language.generate(cfg.doc_length, rng));
  a.main = std::make_unique<MainModel>(pretrain_main(docs, cfg.model, cfg.pretrain).model);
  std::vector<TrainingExample> data;
  for (const auto& d : docs) {
    const std::size_t p = cfg.prompt_length;
    data.push_back({TokenSequence(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(p)),
                    TokenSequence(d.begin() + static_cast<std::ptrdiff_t>(p), d.end()), lc.tag, "periodic", false});
  }
  a.training = train_mtp_head(data, *a.main, init_head(cfg.model, cfg.model.seed), cfg.head);
  a.head = std::make_unique<MTPHead>(a.training.head);
  a.task.name = lc.tag;
  a.task.lang = lc.tag;
  a.task.max_new_tokens = cfg.max_new_tokens;
  for (std::size_t i = 0; i < cfg.prompts; ++i) a.task.prompts.push_back(a.language.generate(cfg.prompt_length, rng));
  return a;
}

}  // namespace mtpdraft
