// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "json.hpp"

#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/specdec.hpp"
#include "mtpdraft/vocab.hpp"

namespace mtpdraft {

struct BenchTask {
  std::string name;
  std::string lang;
  std::vector<TokenSequence> prompts;
  std::size_t max_new_tokens = 32;
  bool detect_language = false;  // pick the drafting vocabulary from context instead of `lang`
};

enum class Method { Baseline, VanillaHead, FinetunedHead, FinetunedHeadFR };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::Baseline: return "baseline";
    case Method::VanillaHead: return "vanilla-head";
    case Method::FinetunedHead: return "finetuned-head";
    case Method::FinetunedHeadFR: return "finetuned-head+FR";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::Baseline, Method::VanillaHead, Method::FinetunedHead, Method::FinetunedHeadFR}) {
    if (method_name(m) == s) return m;
  }
  throw ConfigError("unknown method '" + s + "'");
}

struct RunConfig {
  Method method = Method::Baseline;
  std::size_t K = 0;
  std::size_t repetitions = 1;
};

// Models a run may draw on. Heads and bank may be null when unused.
struct BenchModels {
  const MainModel* main = nullptr;
  const MTPHead* vanilla = nullptr;
  const MTPHead* finetuned = nullptr;
  const VocabBank* bank = nullptr;
};

struct ReportRow {
  std::string task;
  std::string method;
  std::size_t K = 0;
  std::size_t vocab_size = 0;  // drafting vocabulary; |V| when uncompressed
  double tau = 1.0;
  std::vector<double> acceptance_rates;  // k = 1..K
  double tokens_per_s = 0.0;
  double tokens_per_s_sd = 0.0;  // across repetitions
  double analytic_speedup = 1.0;
  double speedup = 1.0;  // wall clock vs the task's baseline row
  double c_draft = 0.0;
};

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"task",           "method",          "K",       "vocab_size",
                                                "tau",            "acceptance_rates", "tokens_per_s",
                                                "tokens_per_s_sd", "analytic_speedup", "speedup", "c_draft"};
  return cols;
}

// One executed configuration: the row plus what it was computed from.
struct BenchRun {
  ReportRow row;
  DecodeMetrics metrics;
  std::vector<RoundRecord> log;  // all prompts, in prompt order
  std::vector<TokenSequence> outputs;
  DecodeMetrics timing;  // draft/verify times and counts pooled over repetitions
};

// Mean draft-step time over mean verify-forward time.
inline double measured_c_draft(const DecodeMetrics& m) {
  if (m.draft_forwards == 0 || m.rounds == 0 || m.verify_ns <= 0) return 0.0;
  const double draft = static_cast<double>(m.draft_ns) / static_cast<double>(m.draft_forwards);
  const double verify = static_cast<double>(m.verify_ns) / static_cast<double>(m.rounds);
  return draft / verify;
}

inline double analytic_speedup(double tau, std::size_t K, double c_draft) {
  return tau / (1.0 + static_cast<double>(K) * c_draft);
}

namespace detail {

inline const MTPHead* head_for(Method m, const BenchModels& models) {
  switch (m) {
    case Method::Baseline: return nullptr;
    case Method::VanillaHead: return models.vanilla;
    case Method::FinetunedHead:
    case Method::FinetunedHeadFR: return models.finetuned;
  }
  return nullptr;
}

inline VocabMode vocab_for(Method m, const BenchTask& task, const BenchModels& models) {
  if (m != Method::FinetunedHeadFR) return VocabMode::full();
  if (!models.bank) throw ConfigError("finetuned-head+FR needs a vocabulary bank");
  return task.detect_language ? VocabMode::detect(*models.bank) : VocabMode::tagged(*models.bank, task.lang);
}

inline std::size_t drafting_vocab_size(const VocabMode& mode, const BenchTask& task, std::size_t full) {
  const CompressedVocab* cv = nullptr;
  if (mode.kind == VocabMode::Kind::Fixed) cv = mode.fixed;
  if (mode.kind == VocabMode::Kind::Tagged && mode.bank) cv = mode.bank->lookup(mode.tag);
  if (mode.kind == VocabMode::Kind::Detect && mode.bank) cv = mode.bank->lookup(task.lang);
  return cv ? cv->size() : full;
}

inline std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0};
}

}  // namespace detail

// Decodes every prompt of `task` with one session each. Token outputs are
// identical across repetitions (checked); timings are averaged over them.
inline BenchRun run_task(const BenchTask& task, const MainModel& main, const MTPHead* head, std::size_t K,
                         const VocabMode& vocab, std::size_t repetitions, const std::string& method) {
  if (task.prompts.empty()) throw ConfigError("bench task '" + task.name + "' has no prompts");
  if (K > 0 && !head) throw ConfigError("bench: method " + method + " has no head loaded");
  BenchRun run;
  std::vector<double> tps;
  DecodeMetrics& timing = run.timing;
  for (std::size_t rep = 0; rep < std::max<std::size_t>(repetitions, 1); ++rep) {
    DecodeMetrics metrics;
    std::vector<RoundRecord> log;
    std::vector<TokenSequence> outputs;
    std::size_t generated = 0;
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& prompt : task.prompts) {
      DecodeSession s(main, head, prompt, {K, task.max_new_tokens, vocab, true});
      s.run();
      metrics.merge(s.metrics());
      log.insert(log.end(), s.log().begin(), s.log().end());
      outputs.push_back(s.output());
      generated += outputs.back().size();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    tps.push_back(secs > 0.0 ? static_cast<double>(generated) / secs : 0.0);
    timing.draft_ns += metrics.draft_ns;
    timing.verify_ns += metrics.verify_ns;
    timing.draft_forwards += metrics.draft_forwards;
    timing.rounds += metrics.rounds;
    if (rep == 0) {
      run.metrics = std::move(metrics);
      run.log = std::move(log);
      run.outputs = std::move(outputs);
    } else if (outputs != run.outputs) {
      throw DeterminismError("bench: outputs differ between repetitions");
    }
  }
  const double c = measured_c_draft(timing);

  ReportRow& row = run.row;
  row.task = task.name;
  row.method = method;
  row.K = K;
  row.vocab_size = detail::drafting_vocab_size(vocab, task, main.config.vocab_size);
  row.tau = run.metrics.tau();
  for (std::size_t k = 1; k <= K; ++k) row.acceptance_rates.push_back(run.metrics.acceptance_rate(k));
  std::tie(row.tokens_per_s, row.tokens_per_s_sd) = detail::mean_sd(tps);
  row.c_draft = K > 0 ? c : 0.0;
  row.analytic_speedup = analytic_speedup(row.tau, K, row.c_draft);
  return run;
}

// Every method row is paired with the task's baseline, which must come
// first in `runs`. All methods must reproduce the baseline tokens.
inline std::vector<BenchRun> run_benchmark(const std::vector<BenchTask>& tasks, const std::vector<RunConfig>& runs,
                                           const BenchModels& models) {
  if (!models.main) throw ConfigError("bench: no main model");
  std::vector<BenchRun> out;
  for (const auto& task : tasks) {
    const BenchRun* base = nullptr;
    std::size_t base_index = 0;
    for (const auto& rc : runs) {
      if (rc.method != Method::Baseline && !base) {
        throw SequencingError("bench: task '" + task.name + "' has no baseline row before " + method_name(rc.method));
      }
      const std::size_t K = rc.method == Method::Baseline ? 0 : rc.K;
      const VocabMode vocab = detail::vocab_for(rc.method, task, models);
      BenchRun run = run_task(task, *models.main, detail::head_for(rc.method, models), K, vocab, rc.repetitions,
                              method_name(rc.method));
      if (rc.method == Method::Baseline) {
        run.row.speedup = 1.0;
        out.push_back(std::move(run));
        base_index = out.size() - 1;
        base = &out[base_index];
        continue;
      }
      base = &out[base_index];
      if (run.outputs != base->outputs) {
        throw ConsistencyError("bench: " + method_name(rc.method) + " output differs from baseline on task " + task.name);
      }
      run.row.speedup = base->row.tokens_per_s > 0.0 ? run.row.tokens_per_s / base->row.tokens_per_s : 0.0;
      out.push_back(std::move(run));
    }
  }
  return out;
}

inline std::vector<ReportRow> rows_of(const std::vector<BenchRun>& runs) {
  std::vector<ReportRow> rows;
  for (const auto& r : runs) rows.push_back(r.row);
  return rows;
}

// ---------------------------------------------------------------------------
// Sweeps.

struct DepthSweep {
  std::vector<BenchRun> runs;  // K = K_range[i]
  double c_draft = 0.0;        // pooled over all K >= 1 runs
  std::size_t best_K = 0;      // argmax of analytic speedup, lowest K on ties
  std::vector<std::string> warnings;
};

// Lowest K attaining the largest analytic speedup in `rows`.
inline std::size_t analytic_argmax(const std::vector<ReportRow>& rows) {
  if (rows.empty()) throw ConfigError("analytic_argmax: empty table");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].analytic_speedup > rows[best].analytic_speedup ||
        (rows[i].analytic_speedup == rows[best].analytic_speedup && rows[i].K < rows[best].K)) {
      best = i;
    }
  }
  return rows[best].K;
}

inline DepthSweep sweep_draft_depth(const BenchTask& task, const std::vector<std::size_t>& K_range,
                                    const MainModel& main, const MTPHead& head, std::size_t trained_depth,
                                    const std::string& method = "finetuned-head", std::size_t repetitions = 1) {
  DepthSweep sw;
  DecodeMetrics pooled;
  for (std::size_t K : K_range) {
    if (K > trained_depth) {
      sw.warnings.push_back("K=" + std::to_string(K) + " exceeds the head's trained depth " +
                            std::to_string(trained_depth));
    }
    BenchRun run = run_task(task, main, K > 0 ? &head : nullptr, K, VocabMode::full(), repetitions,
                            K == 0 ? "baseline" : method);
    if (K > 0) {
      pooled.draft_ns += run.timing.draft_ns;
      pooled.draft_forwards += run.timing.draft_forwards;
      pooled.verify_ns += run.timing.verify_ns;
      pooled.rounds += run.timing.rounds;
    }
    sw.runs.push_back(std::move(run));
  }
  sw.c_draft = measured_c_draft(pooled);
  double base_tps = 0.0;
  for (auto& r : sw.runs) {
    if (r.row.K == 0) base_tps = r.row.tokens_per_s;
  }
  std::vector<ReportRow> rows;
  for (auto& r : sw.runs) {
    r.row.c_draft = r.row.K > 0 ? sw.c_draft : 0.0;
    r.row.analytic_speedup = analytic_speedup(r.row.tau, r.row.K, r.row.c_draft);
    r.row.speedup = base_tps > 0.0 ? r.row.tokens_per_s / base_tps : 0.0;
    rows.push_back(r.row);
  }
  sw.best_K = analytic_argmax(rows);
  return sw;
}

struct VocabSweepEntry {
  BenchRun run;
  double coverage = 1.0;
  std::uint64_t multiplies_per_step = 0;
};

struct VocabSweep {
  std::vector<VocabSweepEntry> entries;
  std::vector<std::string> warnings;
};

// One compressed vocabulary per size, built from `table` and attached to the
// main model's output head; the drafting head and K stay fixed.
inline VocabSweep sweep_vocab_size(const BenchTask& task, const std::vector<std::size_t>& sizes, const MainModel& main,
                                   const MTPHead& head, std::size_t K, const FrequencyTable& table,
                                   std::size_t repetitions = 1) {
  VocabSweep sw;
  const std::size_t V = main.config.vocab_size;
  for (std::size_t size : sizes) {
    if (size > V) {
      sw.warnings.push_back("vocab size " + std::to_string(size) + " clamped to " + std::to_string(V));
      size = V;
    }
    CompressedVocab cv = compress_vocab(table, size, special_tokens(), V);
    cv.attach(main.output_head());
    VocabSweepEntry e{run_task(task, main, &head, K, VocabMode::fixed_vocab(cv), repetitions, "finetuned-head+FR"),
                      coverage(table, cv.keep()), 0};
    e.run.row.vocab_size = cv.size();
    e.multiplies_per_step =
        e.run.metrics.draft_forwards ? e.run.metrics.draft_multiplies / e.run.metrics.draft_forwards : 0;
    sw.entries.push_back(std::move(e));
  }
  return sw;
}

// ---------------------------------------------------------------------------
// Reports.

// Shortest round-trip representation with at least three decimals.
inline std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::fixed);
  std::string s(buf, res.ptr);
  const auto dot = s.find('.');
  if (dot == std::string::npos) return s + ".000";
  const std::size_t decimals = s.size() - dot - 1;
  if (decimals < 3) s.append(3 - decimals, '0');
  return s;
}

inline double parse_number(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("report: bad number '" + s + "'");
  return v;
}

namespace detail {

inline std::string join_rates(const std::vector<double>& r) {
  std::string s;
  for (std::size_t i = 0; i < r.size(); ++i) s += (i ? ";" : "") + format_number(r[i]);
  return s;
}

inline std::vector<double> split_rates(const std::string& s) {
  std::vector<double> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ';')) out.push_back(parse_number(part));
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline nlohmann::json json_number(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(); }
inline double number_from_json(const nlohmann::json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

}  // namespace detail

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out;
  const auto& cols = report_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out += (i ? "," : "") + cols[i];
  out += "\n";
  for (const auto& r : rows) {
    out += detail::csv_field(r.task) + "," + detail::csv_field(r.method) + "," + std::to_string(r.K) + "," +
           std::to_string(r.vocab_size) + "," + format_number(r.tau) + "," + detail::join_rates(r.acceptance_rates) +
           "," + format_number(r.tokens_per_s) + "," + format_number(r.tokens_per_s_sd) + "," +
           format_number(r.analytic_speedup) + "," + format_number(r.speedup) + "," + format_number(r.c_draft) + "\n";
  }
  return out;
}

inline std::vector<ReportRow> parse_report_csv(const std::string& text) {
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) throw IoError("report: empty CSV");
  if (detail::csv_split(line) != report_columns()) throw IoError("report: unexpected CSV header");
  std::vector<ReportRow> rows;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    auto f = detail::csv_split(line);
    if (f.size() != report_columns().size()) throw IoError("report: wrong field count in '" + line + "'");
    ReportRow r;
    r.task = f[0];
    r.method = f[1];
    r.K = static_cast<std::size_t>(parse_number(f[2]));
    r.vocab_size = static_cast<std::size_t>(parse_number(f[3]));
    r.tau = parse_number(f[4]);
    r.acceptance_rates = detail::split_rates(f[5]);
    r.tokens_per_s = parse_number(f[6]);
    r.tokens_per_s_sd = parse_number(f[7]);
    r.analytic_speedup = parse_number(f[8]);
    r.speedup = parse_number(f[9]);
    r.c_draft = parse_number(f[10]);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::json report_json(const std::vector<ReportRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json rates = nlohmann::json::array();
    for (double x : r.acceptance_rates) rates.push_back(detail::json_number(x));
    arr.push_back({{"task", r.task},
                   {"method", r.method},
                   {"K", r.K},
                   {"vocab_size", r.vocab_size},
                   {"tau", detail::json_number(r.tau)},
                   {"acceptance_rates", rates},
                   {"tokens_per_s", detail::json_number(r.tokens_per_s)},
                   {"tokens_per_s_sd", detail::json_number(r.tokens_per_s_sd)},
                   {"analytic_speedup", detail::json_number(r.analytic_speedup)},
                   {"speedup", detail::json_number(r.speedup)},
                   {"c_draft", detail::json_number(r.c_draft)}});
  }
  return {{"columns", report_columns()}, {"rows", arr}};
}

inline std::vector<ReportRow> parse_report_json(const nlohmann::json& j) {
  std::vector<ReportRow> rows;
  for (const auto& e : j.at("rows")) {
    ReportRow r;
    r.task = e.at("task").get<std::string>();
    r.method = e.at("method").get<std::string>();
    r.K = e.at("K").get<std::size_t>();
    r.vocab_size = e.at("vocab_size").get<std::size_t>();
    r.tau = detail::number_from_json(e.at("tau"));
    for (const auto& x : e.at("acceptance_rates")) r.acceptance_rates.push_back(detail::number_from_json(x));
    r.tokens_per_s = detail::number_from_json(e.at("tokens_per_s"));
    r.tokens_per_s_sd = detail::number_from_json(e.at("tokens_per_s_sd"));
    r.analytic_speedup = detail::number_from_json(e.at("analytic_speedup"));
    r.speedup = detail::number_from_json(e.at("speedup"));
    r.c_draft = detail::number_from_json(e.at("c_draft"));
    rows.push_back(std::move(r));
  }
  return rows;
}

enum class ReportFormat { Csv, Json };

inline void emit_report(const std::vector<ReportRow>& rows, ReportFormat format, const std::filesystem::path& path) {
  if (rows.empty()) throw ConfigError("emit_report: no rows");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  if (format == ReportFormat::Csv) {
    os << report_csv(rows);
  } else {
    os << report_json(rows).dump(2) << "\n";
  }
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::vector<ReportRow> load_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  if (path.extension() == ".json") {
    try {
      return parse_report_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed report " + path.string() + ": " + e.what());
    }
  }
  return parse_report_csv(text);
}

// Field-wise equality that treats NaN as equal to NaN.
inline bool same_row(const ReportRow& a, const ReportRow& b) {
  auto eq = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  if (a.task != b.task || a.method != b.method || a.K != b.K || a.vocab_size != b.vocab_size) return false;
  if (a.acceptance_rates.size() != b.acceptance_rates.size()) return false;
  for (std::size_t i = 0; i < a.acceptance_rates.size(); ++i) {
    if (!eq(a.acceptance_rates[i], b.acceptance_rates[i])) return false;
  }
  return eq(a.tau, b.tau) && eq(a.tokens_per_s, b.tokens_per_s) && eq(a.tokens_per_s_sd, b.tokens_per_s_sd) &&
         eq(a.analytic_speedup, b.analytic_speedup) && eq(a.speedup, b.speedup) && eq(a.c_draft, b.c_draft);
}

}  // namespace mtpdraft
