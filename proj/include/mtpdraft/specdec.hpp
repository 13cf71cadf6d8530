// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Greedy draft-and-verify decoding with a single recursive head.
//
// Session state between rounds: the main cache holds the verified prefix
// t_0..t_{P-1}; t_P (the pending token) is verified but not yet processed.
// The head stream entry e pairs main hidden h_e with t_{e+1}, so the head
// cache trails the main cache: entries 0..E-1 are cached and the main hiddens
// h_E..h_{P-1} wait in `pending_hidden_`.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"
#include "mtpdraft/tokenizer.hpp"
#include "mtpdraft/vocab.hpp"

namespace mtpdraft {

// Which output rows drafting may use. Verification always uses all of W.
struct VocabMode {
  enum class Kind { Full, Fixed, Tagged, Detect };
  Kind kind = Kind::Full;
  const CompressedVocab* fixed = nullptr;
  const VocabBank* bank = nullptr;
  std::string tag;

  static VocabMode full() { return {}; }
  static VocabMode fixed_vocab(const CompressedVocab& cv) { return {Kind::Fixed, &cv, nullptr, cv.lang()}; }
  // Bank entry for a known language tag (unknown tags fall back to full).
  static VocabMode tagged(const VocabBank& bank, std::string tag) { return {Kind::Tagged, nullptr, &bank, std::move(tag)}; }
  // Bank entry chosen from the context once per round.
  static VocabMode detect(const VocabBank& bank) { return {Kind::Detect, nullptr, &bank, {}}; }
};

struct DecodeOptions {
  std::size_t K = 3;
  std::size_t max_new_tokens = 32;
  VocabMode vocab;
  bool stop_at_eos = true;
};

struct DecodeMetrics {
  std::size_t rounds = 0;
  std::vector<std::size_t> drafted_at_step;   // rounds that drafted a k-th token
  std::vector<std::size_t> accepted_at_step;  // ... and accepted it
  std::size_t total_output_tokens = 0;        // sum over rounds of accepted + 1
  std::size_t accepted_drafts = 0;
  std::size_t main_forwards = 0;
  std::size_t draft_forwards = 0;
  std::uint64_t draft_multiplies = 0;
  std::int64_t prefill_ns = 0;
  std::int64_t draft_ns = 0;
  std::int64_t verify_ns = 0;

  // Mean committed tokens per decode forward.
  double tau() const {
    return rounds ? static_cast<double>(total_output_tokens) / static_cast<double>(rounds) : 1.0;
  }

  // Among rounds that drafted a k-th token (k >= 1), the fraction whose
  // k-th draft was accepted. NaN when no round drafted that far.
  double acceptance_rate(std::size_t k) const {
    if (k == 0 || k > drafted_at_step.size() || drafted_at_step[k - 1] == 0) return std::nan("");
    return static_cast<double>(accepted_at_step[k - 1]) / static_cast<double>(drafted_at_step[k - 1]);
  }

  void merge(const DecodeMetrics& o) {
    rounds += o.rounds;
    const std::size_t n = std::max(drafted_at_step.size(), o.drafted_at_step.size());
    drafted_at_step.resize(n, 0);
    accepted_at_step.resize(n, 0);
    for (std::size_t k = 0; k < o.drafted_at_step.size(); ++k) {
      drafted_at_step[k] += o.drafted_at_step[k];
      accepted_at_step[k] += o.accepted_at_step[k];
    }
    total_output_tokens += o.total_output_tokens;
    accepted_drafts += o.accepted_drafts;
    main_forwards += o.main_forwards;
    draft_forwards += o.draft_forwards;
    draft_multiplies += o.draft_multiplies;
    prefill_ns += o.prefill_ns;
    draft_ns += o.draft_ns;
    verify_ns += o.verify_ns;
  }
};

struct RoundRecord {
  std::size_t round = 0;
  TokenSequence drafts;
  std::size_t accepted = 0;
  TokenId next_token = 0;
  std::int64_t draft_ns = 0;
  std::int64_t verify_ns = 0;
  std::string lang;

  bool operator==(const RoundRecord&) const = default;
};

struct DraftRound {
  std::size_t round = 0;
  std::size_t base_length = 0;  // main cache length when drafted
  TokenSequence drafts;
  std::vector<Tensor> hidden;                  // head output per step (last stream entry)
  std::vector<Tensor> logits;                  // per step, compressed space when active
  std::vector<const MTPHead*> head_per_step;   // the weight set used at each step
  std::string lang;
  std::int64_t draft_ns = 0;
};

struct VerificationOutcome {
  std::size_t accepted = 0;
  TokenId next_token = 0;
  // Per draft position up to where verification stopped. A matching
  // end-of-sequence draft stops it too and is committed as next_token.
  std::vector<bool> matched;
  std::size_t committed() const { return accepted + 1; }
};

namespace detail {

inline std::int64_t elapsed_ns(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - since).count();
}

inline Tensor last_row(const Tensor& t) {
  const std::size_t d = t.cols();
  return Tensor({1, d}, std::vector<double>(t.ptr() + (t.rows() - 1) * d, t.ptr() + t.rows() * d));
}

inline Tensor append_rows(const Tensor& a, const Tensor& b) {
  if (a.size() == 0) return b;
  std::vector<double> v(a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return Tensor({a.rows() + b.rows(), b.cols()}, std::move(v));
}

inline Tensor first_rows(const Tensor& t, std::size_t n) {
  const std::size_t d = t.cols();
  return Tensor({n, d}, std::vector<double>(t.ptr(), t.ptr() + n * d));
}

}  // namespace detail

class DecodeSession {
 public:
  // Runs the prefill: one main forward over the prompt, whose greedy token
  // becomes the first output, and the head stream over the prompt's own
  // shifted pairs. `head` may be null when K is 0.
  DecodeSession(const MainModel& main, const MTPHead* head, std::span<const TokenId> prompt, DecodeOptions opts)
      : main_(main), head_(head), opts_(std::move(opts)), main_cache_(KVCache::for_main(main.config)) {
    if (prompt.empty()) throw DimensionError("decode: empty prompt");
    if (prompt.size() + opts_.max_new_tokens > main.config.max_seq_len) {
      throw CapacityError("decode: prompt length + max_new_tokens exceeds max_seq_len");
    }
    if (opts_.K > 0 && !head_) throw ConfigError("decode: K > 0 needs an MTP head");
    if (head_) head_cache_ = KVCache::for_head(head_->config);
    metrics_.drafted_at_step.assign(opts_.K, 0);
    metrics_.accepted_at_step.assign(opts_.K, 0);
    tokens_.assign(prompt.begin(), prompt.end());
    prompt_len_ = prompt.size();
    if (opts_.max_new_tokens == 0) {
      done_ = true;
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    MainOutput out = main_forward(main_, prompt, main_cache_, true);
    ++metrics_.main_forwards;
    pending_hidden_ = out.hidden;
    const TokenId first = greedy_argmax(out.logits.row(0));
    tokens_.push_back(first);
    if (head_ && opts_.K > 0 && prompt.size() > 1) {
      // Entries (h_e, t_{e+1}) for e < P - 1 only involve prompt tokens.
      const std::size_t n = prompt.size() - 1;
      mtp_step(*head_, main_, detail::first_rows(pending_hidden_, n), prompt.subspan(1, n), head_cache_);
      pending_hidden_ = detail::last_row(pending_hidden_);
    }
    metrics_.prefill_ns = detail::elapsed_ns(t0);
    finish_if_done(first);
  }

  bool done() const { return done_; }
  std::size_t prompt_length() const { return prompt_len_; }
  // Generated continuation, excluding the prompt.
  TokenSequence output() const {
    return TokenSequence(tokens_.begin() + static_cast<std::ptrdiff_t>(prompt_len_), tokens_.end());
  }
  const TokenSequence& tokens() const { return tokens_; }
  const DecodeMetrics& metrics() const { return metrics_; }
  const std::vector<RoundRecord>& log() const { return log_; }
  const KVCache& main_cache() const { return main_cache_; }
  const KVCache& head_cache() const { return head_cache_; }

  // Drafts up to K tokens; fewer when the output budget is nearly spent or an
  // end-of-sequence draft ends the chain.
  DraftRound draft_round(std::size_t K) {
    if (done_) throw StateError("draft_round: session is finished");
    if (K > 0 && !head_) throw ConfigError("draft_round: K > 0 needs an MTP head");
    const auto t0 = std::chrono::steady_clock::now();
    DraftRound r;
    r.round = metrics_.rounds;
    r.base_length = main_cache_.length();
    const std::size_t k_eff = std::min(K, remaining() - 1);
    const CompressedVocab* cv = active_vocab(r.lang);
    if (k_eff > 0) {
      // Step 1 consumes the pending main hiddens paired with the next tokens.
      const std::size_t e0 = head_cache_.length();
      const std::size_t n = pending_hidden_.rows();
      std::span<const TokenId> shifted(tokens_.data() + e0 + 1, n);
      MtpStepOutput step = mtp_step(*head_, main_, pending_hidden_, shifted, head_cache_);
      for (std::size_t k = 1;; ++k) {
        Tensor pre = detail::last_row(step.pre_logit);
        CompressedDraft d = cv ? draft_logits_compressed(pre.data(), *cv, &ops_)
                               : draft_logits_full(pre.data(), main_.output_head(), &ops_);
        r.drafts.push_back(d.token);
        r.hidden.push_back(detail::last_row(step.hidden));
        r.logits.push_back(std::move(d.logits));
        r.head_per_step.push_back(head_);
        if (k == k_eff || (opts_.stop_at_eos && d.token == kEosToken)) break;
        const TokenId prev[] = {d.token};
        step = mtp_step(*head_, main_, r.hidden.back(), prev, head_cache_);
      }
    }
    r.draft_ns = detail::elapsed_ns(t0);
    drafted_ = true;
    return r;
  }

  // One main forward over [pending token, drafts...]; accepts drafts up to
  // the first disagreement with the main model's greedy choice and commits
  // the main model's own token after them.
  VerificationOutcome verify_round(const DraftRound& r) {
    if (done_) throw StateError("verify_round: session is finished");
    if (!drafted_ || r.round != metrics_.rounds || r.base_length != main_cache_.length()) {
      throw StateError("verify_round: round was not drafted from the current session state");
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t P = main_cache_.length();
    TokenSequence block;
    block.push_back(tokens_.back());
    block.insert(block.end(), r.drafts.begin(), r.drafts.end());
    MainOutput out = main_forward(main_, block, main_cache_);
    ++metrics_.main_forwards;
    VerificationOutcome v;
    for (std::size_t j = 0; j <= r.drafts.size(); ++j) {
      const TokenId target = greedy_argmax(out.logits.row(j));
      const bool match = j < r.drafts.size() && target == r.drafts[j];
      // The main model's end-of-sequence closes the round as its own token,
      // so nothing is ever committed after it.
      if (!match || (opts_.stop_at_eos && target == kEosToken)) {
        v.next_token = target;
        if (j < r.drafts.size()) v.matched.push_back(match);
        break;
      }
      v.matched.push_back(true);
      ++v.accepted;
    }

    main_cache_.truncate(P + v.accepted + 1);
    if (head_) {
      head_cache_.truncate(std::min(head_cache_.length(), P));
      // Hiddens of the pending token and the accepted drafts feed the next round.
      Tensor fresh = detail::first_rows(out.hidden, v.accepted + 1);
      pending_hidden_ = head_cache_.length() == P ? std::move(fresh) : detail::append_rows(pending_hidden_, fresh);
    }
    const std::int64_t verify_ns = detail::elapsed_ns(t0);

    metrics_.rounds += 1;
    metrics_.total_output_tokens += v.committed();
    metrics_.accepted_drafts += v.accepted;
    metrics_.draft_forwards += r.drafts.size();
    metrics_.draft_multiplies = ops_.multiplies;
    metrics_.draft_ns += r.draft_ns;
    metrics_.verify_ns += verify_ns;
    for (std::size_t k = 1; k <= r.drafts.size(); ++k) {
      if (metrics_.drafted_at_step.size() < k) {
        metrics_.drafted_at_step.resize(k, 0);
        metrics_.accepted_at_step.resize(k, 0);
      }
      ++metrics_.drafted_at_step[k - 1];
      if (v.accepted >= k) ++metrics_.accepted_at_step[k - 1];
    }
    log_.push_back({r.round, r.drafts, v.accepted, v.next_token, r.draft_ns, verify_ns, r.lang});

    tokens_.insert(tokens_.end(), r.drafts.begin(), r.drafts.begin() + static_cast<std::ptrdiff_t>(v.accepted));
    tokens_.push_back(v.next_token);
    drafted_ = false;
    finish_if_done(v.next_token);
    return v;
  }

  // Draft and verify until the budget is spent or end-of-sequence.
  void run() {
    while (!done_) verify_round(draft_round(opts_.K));
  }

 private:
  std::size_t remaining() const { return prompt_len_ + opts_.max_new_tokens - tokens_.size(); }

  void finish_if_done(TokenId last) {
    if (remaining() == 0 || (opts_.stop_at_eos && last == kEosToken)) done_ = true;
  }

  const CompressedVocab* active_vocab(std::string& lang) {
    const VocabMode& m = opts_.vocab;
    switch (m.kind) {
      case VocabMode::Kind::Full:
        lang = kFullVocabTag;
        return nullptr;
      case VocabMode::Kind::Fixed:
        lang = m.fixed->lang();
        return m.fixed;
      case VocabMode::Kind::Tagged:
        lang = m.tag;
        break;
      case VocabMode::Kind::Detect:
        lang = detect_language(tokens_);
        break;
    }
    const CompressedVocab* cv = m.bank ? m.bank->lookup(lang) : nullptr;
    if (!cv) lang = kFullVocabTag;
    return cv;
  }

  const MainModel& main_;
  const MTPHead* head_;
  DecodeOptions opts_;
  KVCache main_cache_;
  KVCache head_cache_;
  Tensor pending_hidden_;
  TokenSequence tokens_;
  std::size_t prompt_len_ = 0;
  bool done_ = false;
  bool drafted_ = false;
  OpCounter ops_;
  DecodeMetrics metrics_;
  std::vector<RoundRecord> log_;
};

struct DecodeResult {
  TokenSequence output;
  DecodeMetrics metrics;
  std::vector<RoundRecord> log;
};

inline DecodeResult speculative_decode(const MainModel& main, const MTPHead* head, std::span<const TokenId> prompt,
                                       std::size_t max_new_tokens, std::size_t K, VocabMode vocab = VocabMode::full(),
                                       bool stop_at_eos = true) {
  DecodeSession s(main, head, prompt, {K, max_new_tokens, std::move(vocab), stop_at_eos});
  s.run();
  return {s.output(), s.metrics(), s.log()};
}

// Plain greedy loop; the reference every other decoder must reproduce.
inline TokenSequence baseline_decode(const MainModel& main, std::span<const TokenId> prompt,
                                     std::size_t max_new_tokens, bool stop_at_eos = true) {
  if (prompt.empty()) throw DimensionError("baseline_decode: empty prompt");
  if (prompt.size() + max_new_tokens > main.config.max_seq_len) {
    throw CapacityError("baseline_decode: prompt length + max_new_tokens exceeds max_seq_len");
  }
  TokenSequence out;
  if (max_new_tokens == 0) return out;
  KVCache cache = KVCache::for_main(main.config);
  MainOutput o = main_forward(main, prompt, cache, true);
  while (true) {
    const TokenId t = greedy_argmax(o.logits.row(o.logits.rows() - 1));
    out.push_back(t);
    if (out.size() == max_new_tokens || (stop_at_eos && t == kEosToken)) break;
    const TokenId one[] = {t};
    o = main_forward(main, one, cache);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Round logs.

inline nlohmann::json round_record_json(const RoundRecord& r) {
  return {{"round", r.round},         {"drafts", r.drafts},       {"accepted", r.accepted},
          {"next_token", r.next_token}, {"draft_ns", r.draft_ns}, {"verify_ns", r.verify_ns},
          {"lang", r.lang}};
}

inline RoundRecord round_record_from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.round = j.at("round").get<std::size_t>();
  r.drafts = j.at("drafts").get<TokenSequence>();
  r.accepted = j.at("accepted").get<std::size_t>();
  r.next_token = j.at("next_token").get<TokenId>();
  r.draft_ns = j.value("draft_ns", std::int64_t{0});
  r.verify_ns = j.value("verify_ns", std::int64_t{0});
  r.lang = j.value("lang", std::string{});
  return r;
}

inline void write_round_log(std::ostream& os, std::span<const RoundRecord> log) {
  for (const auto& r : log) os << round_record_json(r).dump() << "\n";
}

inline void write_round_log(const std::filesystem::path& path, std::span<const RoundRecord> log) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_round_log(os, log);
  if (!os) throw IoError("write failed for " + path.string());
}

inline std::vector<RoundRecord> read_round_log(std::istream& is) {
  std::vector<RoundRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(round_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(std::string("round log: malformed line: ") + e.what());
    }
  }
  return out;
}

inline std::vector<RoundRecord> read_round_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  return read_round_log(is);
}

// Metrics recomputed from a round log alone.
struct LogReplay {
  std::size_t rounds = 0;
  std::size_t total_output_tokens = 0;
  std::vector<std::size_t> drafted_at_step;
  std::vector<std::size_t> accepted_at_step;

  double tau() const {
    return rounds ? static_cast<double>(total_output_tokens) / static_cast<double>(rounds) : 1.0;
  }
  double acceptance_rate(std::size_t k) const {
    if (k == 0 || k > drafted_at_step.size() || drafted_at_step[k - 1] == 0) return std::nan("");
    return static_cast<double>(accepted_at_step[k - 1]) / static_cast<double>(drafted_at_step[k - 1]);
  }
};

inline LogReplay replay_round_log(std::span<const RoundRecord> log) {
  LogReplay r;
  for (const auto& rec : log) {
    if (rec.accepted > rec.drafts.size()) throw ConsistencyError("round log: accepted exceeds drafts");
    ++r.rounds;
    r.total_output_tokens += rec.accepted + 1;
    if (r.drafted_at_step.size() < rec.drafts.size()) {
      r.drafted_at_step.resize(rec.drafts.size(), 0);
      r.accepted_at_step.resize(rec.drafts.size(), 0);
    }
    for (std::size_t k = 1; k <= rec.drafts.size(); ++k) {
      ++r.drafted_at_step[k - 1];
      if (rec.accepted >= k) ++r.accepted_at_step[k - 1];
    }
  }
  return r;
}

}  // namespace mtpdraft
