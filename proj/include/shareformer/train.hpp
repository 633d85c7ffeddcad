// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic training: synthetic seq2seq tasks, token-budget batching,
// Adam with the inverse-square-root warmup schedule, greedy decoding, and a
// CSV run report. Divergence is a reportable outcome, not a crash.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shareformer/model.hpp"
#include "shareformer/rng.hpp"
#include "shareformer/tensor.hpp"

namespace shareformer {

// ---- synthetic tasks ----

enum class TaskKind { kCopy, kReverse, kSort, kFile };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kSort: return "sort";
    case TaskKind::kFile: return "file";
  }
  return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "copy") return TaskKind::kCopy;
  if (s == "reverse") return TaskKind::kReverse;
  if (s == "sort") return TaskKind::kSort;
  if (s == "file") return TaskKind::kFile;
  throw std::invalid_argument("unknown task kind: '" + s + "'");
}

// Pre-tokenized source/target payload pairs. Synthetic kinds derive the
// target from the source; kFile serves pairs loaded from disk verbatim.
struct SynthTask {
  TaskKind kind = TaskKind::kCopy;
  int vocab_size = 20;
  int len_min = 4;
  int len_max = 10;
  std::uint64_t seed = 1;
  int pad_id = 0, bos_id = 1, eos_id = 2;
  std::vector<std::vector<int>> file_src, file_tgt;  // kFile only

  int first_payload_id() const { return std::max({pad_id, bos_id, eos_id}) + 1; }

  // payload pair (unframed); pure function of (task seed, index)
  std::pair<std::vector<int>, std::vector<int>> sample(std::uint64_t index) const {
    if (kind == TaskKind::kFile) {
      if (file_src.empty()) throw std::logic_error("file task has no data loaded");
      const std::size_t i = static_cast<std::size_t>(index % file_src.size());
      return {file_src[i], file_tgt[i]};
    }
    RandomStream rs(mix64(seed, index));
    const int lo = first_payload_id();
    if (lo >= vocab_size) throw std::invalid_argument("vocab too small for payload tokens");
    const int len = static_cast<int>(rs.uniform_int(len_min, len_max));
    std::vector<int> src(static_cast<std::size_t>(len));
    for (int& t : src) t = static_cast<int>(rs.uniform_int(lo, vocab_size - 1));
    std::vector<int> tgt = src;
    if (kind == TaskKind::kReverse) std::reverse(tgt.begin(), tgt.end());
    if (kind == TaskKind::kSort) std::stable_sort(tgt.begin(), tgt.end());
    return {src, tgt};
  }
};

// One sequence per line, space-separated integer token ids.
inline std::vector<std::vector<int>> load_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open token file: " + path);
  std::vector<std::vector<int>> lines;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream row(line);
    std::vector<int> ids;
    long long v;
    while (row >> v) ids.push_back(static_cast<int>(v));
    if (!row.eof()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": non-integer token");
    }
    if (!ids.empty()) lines.push_back(std::move(ids));
  }
  return lines;
}

// ---- batching ----

struct Batch {
  std::vector<int> src;      // [B * src_len]
  std::vector<int> tgt_in;   // [B * tgt_len], BOS-framed decoder input
  std::vector<int> tgt_out;  // [B * tgt_len], EOS-framed labels
  std::int64_t batch = 0, src_len = 0, tgt_len = 0;
  std::int64_t src_tokens = 0;     // non-pad source tokens
  std::int64_t target_tokens = 0;  // non-pad label tokens
};

// Deterministic per (task, seed): batch k of a stream is a pure function of
// its index, independent of who consumed earlier batches.
class BatchStream {
 public:
  BatchStream(const SynthTask& task, int batch_tokens, std::uint64_t seed)
      : task_(task), batch_tokens_(std::max(1, batch_tokens)), seed_(seed) {}

  Batch next() {
    std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
    std::int64_t max_src = 0, max_tgt = 0;
    for (;;) {
      auto pair = task_.sample(sample_index());
      const std::int64_t s = static_cast<std::int64_t>(pair.first.size()) + 1;   // + EOS
      const std::int64_t t = static_cast<std::int64_t>(pair.second.size()) + 1;  // + BOS/EOS shift
      const std::int64_t new_src = std::max(max_src, s);
      const std::int64_t new_tgt = std::max(max_tgt, t);
      const std::int64_t cost = static_cast<std::int64_t>(pairs.size() + 1) * (new_src + new_tgt);
      if (!pairs.empty() && cost > batch_tokens_) {
        --cursor_;  // sample belongs to the next batch
        break;
      }
      pairs.push_back(std::move(pair));
      max_src = new_src;
      max_tgt = new_tgt;
      if (static_cast<std::int64_t>(pairs.size() + 1) * (max_src + max_tgt) > batch_tokens_) break;
    }
    return assemble(pairs, max_src, max_tgt);
  }

 private:
  std::uint64_t sample_index() { return mix64(seed_, cursor_++); }

  Batch assemble(const std::vector<std::pair<std::vector<int>, std::vector<int>>>& pairs,
                 std::int64_t max_src, std::int64_t max_tgt) const {
    Batch b;
    b.batch = static_cast<std::int64_t>(pairs.size());
    b.src_len = max_src;
    b.tgt_len = max_tgt;
    b.src.assign(static_cast<std::size_t>(b.batch * max_src), task_.pad_id);
    b.tgt_in.assign(static_cast<std::size_t>(b.batch * max_tgt), task_.pad_id);
    b.tgt_out.assign(static_cast<std::size_t>(b.batch * max_tgt), task_.pad_id);
    for (std::int64_t i = 0; i < b.batch; ++i) {
      const auto& [sp, tp] = pairs[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < sp.size(); ++j) b.src[static_cast<std::size_t>(i * max_src) + j] = sp[j];
      b.src[static_cast<std::size_t>(i * max_src) + sp.size()] = task_.eos_id;
      b.tgt_in[static_cast<std::size_t>(i * max_tgt)] = task_.bos_id;
      for (std::size_t j = 0; j < tp.size(); ++j) {
        b.tgt_in[static_cast<std::size_t>(i * max_tgt) + j + 1] = tp[j];
        b.tgt_out[static_cast<std::size_t>(i * max_tgt) + j] = tp[j];
      }
      b.tgt_out[static_cast<std::size_t>(i * max_tgt) + tp.size()] = task_.eos_id;
      b.src_tokens += static_cast<std::int64_t>(sp.size()) + 1;
      b.target_tokens += static_cast<std::int64_t>(tp.size()) + 1;
    }
    return b;
  }

  SynthTask task_;
  std::int64_t batch_tokens_;
  std::uint64_t seed_;
  std::uint64_t cursor_ = 0;
};

inline std::vector<Batch> make_batches(const SynthTask& task, int count, int batch_tokens,
                                       std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("batch count must be >= 1");
  BatchStream stream(task, batch_tokens, seed);
  std::vector<Batch> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(stream.next());
  return out;
}

// ---- optimizer / schedule ----

// d^-0.5 * min(step^-0.5, step * warmup^-1.5), peak at step == warmup
inline double lr_schedule(std::int64_t step, int d_model, std::int64_t warmup, double lr_scale = 1.0) {
  if (step < 1) throw std::invalid_argument("lr_schedule steps start at 1");
  if (warmup < 1) throw std::invalid_argument("warmup must be >= 1");
  const double s = static_cast<double>(step);
  return lr_scale * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

// Bias-corrected Adam over a fixed list of named tensors. A block shared by
// several layer positions is registered once, so it is updated once per step
// with its accumulated (tied) gradient.
template <typename T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add(const std::string& name, Tensor<T> param) {
    names_.push_back(name);
    m_.emplace_back(param.data->size(), T(0));
    v_.emplace_back(param.data->size(), T(0));
    params_.push_back(std::move(param));
  }

  void attach(Model<T>& model) {
    model.store.for_each_param([&](const std::string& name, Tensor<T>& t) { add(name, t); });
  }

  std::int64_t steps_taken() const { return t_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  // Optional global-norm clipping; returns the pre-clip norm.
  double clip_grad_norm(double max_norm) {
    double sq = 0;
    for (auto& p : params_) {
      const T* g = p.g();
      for (std::int64_t i = 0, n = p.numel(); i < n; ++i)
        sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm && norm > 0) {
      const T scale = static_cast<T>(max_norm / norm);
      for (auto& p : params_) {
        T* g = p.g();
        for (std::int64_t i = 0, n = p.numel(); i < n; ++i) g[i] *= scale;
      }
    }
    return norm;
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor<T>& p = params_[pi];
      const T* g = p.g();
      T* pv = p.v();
      T* m = m_[pi].data();
      T* v = v_[pi].data();
      for (std::int64_t i = 0, n = p.numel(); i < n; ++i) {
        const double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi)) {
          throw std::runtime_error("non-finite gradient in tensor '" + names_[pi] + "'");
        }
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
        const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        pv[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_));
      }
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<Tensor<T>> params_;
  std::vector<std::string> names_;
  std::vector<std::vector<T>> m_, v_;
};

// ---- training ----

struct TrainConfig {
  double lr_scale = 1.0;
  std::int64_t warmup_steps = 4000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double label_smoothing = 0.1;
  int batch_tokens = 1024;
  std::int64_t max_steps = 300;
  std::int64_t eval_interval = 50;
  std::uint64_t seed = 1;
  std::string precision = "f32";  // f32 | f64
  double clip_norm = 0.0;         // 0 disables clipping
  int valid_batches = 8;
  bool deterministic = true;
};

inline void validate(const TrainConfig& tc) {
  if (tc.warmup_steps < 1) throw std::invalid_argument("warmup_steps must be >= 1");
  if (tc.label_smoothing < 0.0 || tc.label_smoothing >= 1.0) {
    throw std::invalid_argument("label_smoothing must lie in [0, 1)");
  }
  if (tc.batch_tokens < 1) throw std::invalid_argument("batch_tokens must be >= 1");
  if (tc.max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (tc.eval_interval < 1) throw std::invalid_argument("eval_interval must be >= 1");
  if (tc.precision != "f32" && tc.precision != "f64") {
    throw std::invalid_argument("precision must be f32 or f64");
  }
  if (tc.valid_batches < 1) throw std::invalid_argument("valid_batches must be >= 1");
}

struct ReportRow {
  std::int64_t step = 0;
  double wallclock_s = 0;
  double train_loss = 0;
  double valid_nll = 0;
  double tokens_per_s = 0;
};

struct RunReport {
  std::vector<ReportRow> rows;
  bool diverged = false;
  std::int64_t diverged_step = 0;
  std::string divergence_note;
  double total_wallclock_s = 0;
  double final_valid_nll = std::numeric_limits<double>::quiet_NaN();
};

inline std::string run_report_to_csv(const RunReport& r) {
  std::string out = "step,wallclock_s,train_loss,valid_nll,tokens_per_s\n";
  char buf[160];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.6g,%.6g,%.6g,%.6g\n",
                  static_cast<long long>(row.step), row.wallclock_s, row.train_loss, row.valid_nll,
                  row.tokens_per_s);
    out += buf;
  }
  return out;
}

// Plain NLL (no smoothing) per non-pad target token, dropout off.
template <typename T>
double evaluate_nll(const Model<T>& model, const std::vector<Batch>& batches) {
  double total = 0;
  std::int64_t tokens = 0;
  for (const auto& b : batches) {
    Tape<T> tape;
    Tensor<T> logits = model.forward(tape, b.src, b.batch, b.src_len, b.tgt_in, b.tgt_len, nullptr);
    Tensor<T> loss = tape.cross_entropy_label_smoothed(logits, b.tgt_out, model.config.pad_id, 0.0);
    total += static_cast<double>(loss.item()) * static_cast<double>(b.target_tokens);
    tokens += b.target_tokens;
  }
  return total / static_cast<double>(tokens);
}

template <typename T>
RunReport train_run(Model<T>& model, const SynthTask& task, const TrainConfig& tc) {
  validate(tc);
  if (model.config.vocab_size != task.vocab_size || model.config.pad_id != task.pad_id ||
      model.config.bos_id != task.bos_id || model.config.eos_id != task.eos_id) {
    throw std::invalid_argument("model and task disagree on vocabulary or special tokens");
  }

  const std::vector<Batch> valid =
      make_batches(task, tc.valid_batches, tc.batch_tokens, sub_seed(tc.seed, "valid"));
  BatchStream train_stream(task, tc.batch_tokens, sub_seed(tc.seed, "train"));
  Adam<T> adam(tc.beta1, tc.beta2, tc.adam_eps);
  adam.attach(model);

  RunReport report;
  using Clock = std::chrono::steady_clock;
  const auto run_start = Clock::now();
  double train_seconds_since_row = 0;
  std::int64_t tokens_since_row = 0;

  auto elapsed = [&]() {
    return std::chrono::duration<double>(Clock::now() - run_start).count();
  };
  auto mark_divergence = [&](std::int64_t step, double loss_value, const std::string& note) {
    report.diverged = true;
    report.diverged_step = step;
    report.divergence_note = note;
    ReportRow row;
    row.step = step;
    row.wallclock_s = elapsed();
    row.train_loss = loss_value;
    row.valid_nll = std::numeric_limits<double>::quiet_NaN();
    row.tokens_per_s = 0;
    report.rows.push_back(row);
  };

  for (std::int64_t step = 1; step <= tc.max_steps; ++step) {
    const auto step_start = Clock::now();
    Batch b = train_stream.next();
    Tape<T> tape;
    DropoutState drop = DropoutState::for_step(tc.seed, step);
    Tensor<T> logits = model.forward(tape, b.src, b.batch, b.src_len, b.tgt_in, b.tgt_len,
                                     model.config.dropout > 0 ? &drop : nullptr);
    Tensor<T> loss = tape.cross_entropy_label_smoothed(logits, b.tgt_out, model.config.pad_id,
                                                       tc.label_smoothing);
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) {
      mark_divergence(step, loss_value, "non-finite training loss");
      break;
    }
    adam.zero_grad();
    tape.backward(loss);
    if (tc.clip_norm > 0) adam.clip_grad_norm(tc.clip_norm);
    try {
      adam.step(lr_schedule(step, model.config.d_model, tc.warmup_steps, tc.lr_scale));
    } catch (const std::runtime_error& e) {
      mark_divergence(step, loss_value, e.what());
      break;
    }
    train_seconds_since_row += std::chrono::duration<double>(Clock::now() - step_start).count();
    tokens_since_row += b.src_tokens + b.target_tokens;

    if (step % tc.eval_interval == 0 || step == tc.max_steps) {
      const double vnll = evaluate_nll(model, valid);
      ReportRow row;
      row.step = step;
      row.wallclock_s = elapsed();
      row.train_loss = loss_value;
      row.valid_nll = vnll;
      row.tokens_per_s =
          train_seconds_since_row > 0 ? static_cast<double>(tokens_since_row) / train_seconds_since_row : 0;
      report.rows.push_back(row);
      train_seconds_since_row = 0;
      tokens_since_row = 0;
      if (!std::isfinite(vnll)) {
        report.diverged = true;
        report.diverged_step = step;
        report.divergence_note = "non-finite validation NLL";
        break;
      }
      report.final_valid_nll = vnll;
    }
  }
  report.total_wallclock_s = elapsed();
  return report;
}

// ---- decoding ----

// Argmax decoding until EOS or max_len; returns the generated payload
// (without BOS/EOS). Trailing source padding does not affect the result.
template <typename T>
std::vector<int> greedy_decode(const Model<T>& model, const std::vector<int>& src, int max_len) {
  const std::int64_t src_len = static_cast<std::int64_t>(src.size());
  Tensor<T> enc_out;
  {
    Tape<T> tape;
    enc_out = model.encode(tape, src, 1, src_len, nullptr).detached();
  }
  std::vector<int> tgt_in = {model.config.bos_id};
  std::vector<int> generated;
  for (int t = 0; t < max_len; ++t) {
    Tape<T> tape;
    Tensor<T> logits = model.decode(tape, enc_out, src, 1, src_len, tgt_in,
                                    static_cast<std::int64_t>(tgt_in.size()), nullptr);
    const std::int64_t vocab = logits.dim(1);
    const T* row = logits.v() + (static_cast<std::int64_t>(tgt_in.size()) - 1) * vocab;
    int best = 0;
    for (std::int64_t j = 1; j < vocab; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    if (best == model.config.eos_id) break;
    generated.push_back(best);
    tgt_in.push_back(best);
  }
  return generated;
}

// Exact-sequence accuracy of greedy decoding over held-out task samples.
template <typename T>
double sequence_accuracy(const Model<T>& model, const SynthTask& task, int samples,
                         std::uint64_t seed) {
  int hits = 0;
  for (int i = 0; i < samples; ++i) {
    auto [src_payload, tgt_payload] = task.sample(mix64(sub_seed(seed, "heldout"), static_cast<std::uint64_t>(i)));
    std::vector<int> src = src_payload;
    src.push_back(task.eos_id);
    const std::vector<int> out =
        greedy_decode(model, src, static_cast<int>(tgt_payload.size()) + 4);
    if (out == tgt_payload) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(samples);
}

}  // namespace shareformer
