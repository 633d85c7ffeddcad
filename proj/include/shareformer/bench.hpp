// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training-throughput measurement (tokens/second over full optimization
// steps) and configuration comparison. Numbers are medians over repeated
// trial windows; only orderings and coarse ratios are meaningful.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <sys/utsname.h>

#include "shareformer/model.hpp"
#include "shareformer/train.hpp"

namespace shareformer {

struct BenchResult {
  std::string name;
  std::string strategy;
  int blocks = 0;  // M (encoder side)
  int layers = 0;  // N (encoder side)
  std::int64_t params = 0;
  double tokens_per_s = 0;
  double relative_speed = 1.0;
  int trials = 0;
  int trial_batches = 0;
  int warmup_batches = 0;
  std::string machine;
};

inline std::string machine_descriptor() {
  utsname u{};
  std::string desc = "unknown";
  if (uname(&u) == 0) desc = std::string(u.sysname) + " " + u.machine;
  desc += " threads=" + std::to_string(std::thread::hardware_concurrency());
  return desc;
}

// Full train steps (forward + backward + update); counts non-pad tokens of
// both streams. Warmup batches run first and are excluded from every window.
template <typename T>
BenchResult measure_throughput(Model<T>& model, const SynthTask& task, const TrainConfig& tc,
                               int trial_batches, int trials, const std::string& name = "config",
                               int warmup_batches = 3) {
  if (trial_batches < 10) throw std::invalid_argument("trial_batches must be >= 10 after warmup");
  if (trials < 1) throw std::invalid_argument("trials must be >= 1");

  BatchStream stream(task, tc.batch_tokens, sub_seed(tc.seed, "bench"));
  Adam<T> adam(tc.beta1, tc.beta2, tc.adam_eps);
  adam.attach(model);
  std::int64_t step = 0;

  auto train_step = [&]() -> std::int64_t {
    ++step;
    Batch b = stream.next();
    Tape<T> tape;
    DropoutState drop = DropoutState::for_step(tc.seed, step);
    Tensor<T> logits = model.forward(tape, b.src, b.batch, b.src_len, b.tgt_in, b.tgt_len,
                                     model.config.dropout > 0 ? &drop : nullptr);
    Tensor<T> loss = tape.cross_entropy_label_smoothed(logits, b.tgt_out, model.config.pad_id,
                                                       tc.label_smoothing);
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw std::runtime_error("divergence while benchmarking '" + name + "' at step " +
                               std::to_string(step));
    }
    adam.zero_grad();
    tape.backward(loss);
    if (tc.clip_norm > 0) adam.clip_grad_norm(tc.clip_norm);
    adam.step(lr_schedule(step, model.config.d_model, tc.warmup_steps, tc.lr_scale));
    return b.src_tokens + b.target_tokens;
  };

  for (int i = 0; i < warmup_batches; ++i) (void)train_step();

  using Clock = std::chrono::steady_clock;
  std::vector<double> rates;
  for (int trial = 0; trial < trials; ++trial) {
    std::int64_t tokens = 0;
    const auto t0 = Clock::now();
    for (int i = 0; i < trial_batches; ++i) tokens += train_step();
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    rates.push_back(static_cast<double>(tokens) / secs);
  }
  std::sort(rates.begin(), rates.end());
  const double median = rates.size() % 2 == 1
                            ? rates[rates.size() / 2]
                            : 0.5 * (rates[rates.size() / 2 - 1] + rates[rates.size() / 2]);

  BenchResult r;
  r.name = name;
  r.strategy = to_string(model.config.strategy);
  r.blocks = model.config.enc_blocks;
  r.layers = model.config.enc_layers;
  r.params = param_count(model.config);
  r.tokens_per_s = median;
  r.trials = trials;
  r.trial_batches = trial_batches;
  r.warmup_batches = warmup_batches;
  r.machine = machine_descriptor();
  return r;
}

struct NamedConfig {
  std::string name;
  ModelConfig model;
};

// One result per config, in input order; relative speeds against `baseline`.
template <typename T>
std::vector<BenchResult> compare_configs(const std::vector<NamedConfig>& configs,
                                         const std::string& baseline, const SynthTask& task,
                                         const TrainConfig& tc, int trial_batches, int trials) {
  std::vector<BenchResult> results;
  for (const auto& nc : configs) {
    if (nc.model.vocab_size != task.vocab_size) {
      throw std::invalid_argument("bench config '" + nc.name + "' does not share the task vocab");
    }
    Model<T> model = build_model<T>(nc.model, tc.seed);
    results.push_back(measure_throughput(model, task, tc, trial_batches, trials, nc.name));
  }
  const BenchResult* base = nullptr;
  for (const auto& r : results)
    if (r.name == baseline) base = &r;
  if (!base) throw std::invalid_argument("unknown baseline config: '" + baseline + "'");
  for (auto& r : results) r.relative_speed = r.tokens_per_s / base->tokens_per_s;
  return results;
}

inline std::string bench_results_to_csv(const std::vector<BenchResult>& results) {
  std::string out = "name,strategy,M,N,params,tokens_per_s,relative_speed\n";
  char buf[256];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%d,%d,%lld,%.6g,%.6g\n", r.name.c_str(),
                  r.strategy.c_str(), r.blocks, r.layers, static_cast<long long>(r.params),
                  r.tokens_per_s, r.relative_speed);
    out += buf;
  }
  return out;
}

// Self-contained SVG line chart of valid NLL against wallclock seconds.
inline std::string nll_curves_svg(const std::vector<std::pair<std::string, RunReport>>& runs) {
  constexpr int kW = 720, kH = 440, kMargin = 56;
  double max_x = 1e-9, max_y = 1e-9;
  for (const auto& [name, report] : runs)
    for (const auto& row : report.rows) {
      if (!std::isfinite(row.valid_nll)) continue;
      max_x = std::max(max_x, row.wallclock_s);
      max_y = std::max(max_y, row.valid_nll);
    }
  auto px = [&](double x) { return kMargin + x / max_x * (kW - 2 * kMargin); };
  auto py = [&](double y) { return kH - kMargin - y / max_y * (kH - 2 * kMargin); };
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  char buf[256];
  std::string svg;
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\">\n", kW, kH);
  svg += buf;
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", kMargin,
                kH - kMargin, kW - kMargin, kH - kMargin);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", kMargin,
                kMargin, kMargin, kH - kMargin);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"12\">wallclock (s), max %.4g</text>\n",
                kW / 2 - 60, kH - 16, max_x);
  svg += buf;
  std::snprintf(buf, sizeof(buf),
                "<text x=\"8\" y=\"%d\" font-size=\"12\" transform=\"rotate(-90 14 %d)\">valid NLL, max %.4g</text>\n",
                kH / 2, kH / 2, max_y);
  svg += buf;
  int ci = 0;
  for (const auto& [name, report] : runs) {
    const char* color = kColors[ci % 6];
    std::string points;
    for (const auto& row : report.rows) {
      if (!std::isfinite(row.valid_nll)) continue;
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", px(row.wallclock_s), py(row.valid_nll));
      points += buf;
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" +
           points + "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-size=\"12\" fill=\"%s\">%s</text>\n",
                  kW - kMargin - 180, kMargin + 16 * (ci + 1), color, name.c_str());
    svg += buf;
    ++ci;
  }
  svg += "</svg>\n";
  return svg;
}

}  // namespace shareformer
