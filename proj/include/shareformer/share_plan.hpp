// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer-to-parameter-block assignment. N stacked layers draw their weights
// from M independent blocks; the three strategies decide which block serves
// which depth position. Pure functions, safe from any thread.

#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace shareformer {

enum class ShareStrategy { kSequence, kCycle, kCycleRev };

inline const char* to_string(ShareStrategy s) {
  switch (s) {
    case ShareStrategy::kSequence: return "sequence";
    case ShareStrategy::kCycle: return "cycle";
    case ShareStrategy::kCycleRev: return "cycle_rev";
  }
  return "?";
}

inline ShareStrategy strategy_from_string(const std::string& s) {
  if (s == "sequence") return ShareStrategy::kSequence;
  if (s == "cycle") return ShareStrategy::kCycle;
  if (s == "cycle_rev" || s == "cycle(rev)" || s == "cycle rev") return ShareStrategy::kCycleRev;
  throw std::invalid_argument("unknown share strategy: '" + s +
                              "' (expected sequence, cycle, or cycle_rev)");
}

// SEQUENCE only divides the stack evenly when M | N; with M ∤ N the stride
// floor(N/M) allocates more than M blocks, so such plans are refused outright.
class IndivisibleSequenceError : public std::invalid_argument {
 public:
  IndivisibleSequenceError(int total_layers, int independent_layers)
      : std::invalid_argument(
            "indivisible sequence plan: blocks=" + std::to_string(independent_layers) +
            " does not divide layers=" + std::to_string(total_layers) +
            "; the sequence stride floor(N/M) would allocate more than M blocks") {}
};

struct LayerAssignment {
  int total_layers = 0;        // N
  int independent_layers = 0;  // M
  ShareStrategy strategy = ShareStrategy::kCycle;
  std::vector<int> blocks;     // length N, 1-based block index per layer

  bool operator==(const LayerAssignment&) const = default;
};

inline LayerAssignment build_assignment(int total_layers, int independent_layers,
                                        ShareStrategy strategy) {
  const int n = total_layers;
  const int m = independent_layers;
  if (m < 1) throw std::invalid_argument("independent layers must be >= 1, got " + std::to_string(m));
  if (n < 1) throw std::invalid_argument("total layers must be >= 1, got " + std::to_string(n));
  if (m > n) {
    throw std::invalid_argument("independent layers M=" + std::to_string(m) +
                                " exceeds total layers N=" + std::to_string(n));
  }
  if (strategy == ShareStrategy::kSequence && n % m != 0) {
    throw IndivisibleSequenceError(n, m);
  }

  LayerAssignment a;
  a.total_layers = n;
  a.independent_layers = m;
  a.strategy = strategy;
  a.blocks.resize(static_cast<std::size_t>(n));

  switch (strategy) {
    case ShareStrategy::kSequence: {
      const int run = n / m;
      for (int i = 1; i <= n; ++i) a.blocks[i - 1] = (i - 1) / run + 1;
      break;
    }
    case ShareStrategy::kCycle: {
      for (int i = 1; i <= n; ++i) a.blocks[i - 1] = (i - 1) % m + 1;
      break;
    }
    case ShareStrategy::kCycleRev: {
      const int ceil_nm = (n + m - 1) / m;
      const int forward_until = m * (ceil_nm - 1);
      for (int i = 1; i <= n; ++i) {
        if (i <= forward_until) {
          a.blocks[i - 1] = (i - 1) % m + 1;
        } else {
          a.blocks[i - 1] = m - (i - 1) % m;
        }
      }
      break;
    }
  }
  return a;
}

inline std::map<int, int> block_usage_counts(const LayerAssignment& a) {
  std::map<int, int> counts;
  for (int b : a.blocks) ++counts[b];
  return counts;
}

// One line per layer: "layer i → block b".
inline std::string render_plan(const LayerAssignment& a) {
  std::ostringstream out;
  for (int i = 1; i <= a.total_layers; ++i) {
    if (i > 1) out << '\n';
    out << "layer " << i << " → block " << a.blocks[i - 1];
  }
  return out.str();
}

// Inverse of render_plan (block sequence only); throws on malformed lines.
inline std::vector<int> parse_plan(const std::string& text) {
  std::vector<int> blocks;
  std::istringstream in(text);
  std::string line;
  int expect = 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int layer = 0, block = 0;
    char arrow[8] = {0};
    if (std::sscanf(line.c_str(), "layer %d %7s block %d", &layer, arrow, &block) != 3 ||
        std::string(arrow) != "→" || layer != expect || block < 1) {
      throw std::invalid_argument("unparseable plan line: '" + line + "'");
    }
    blocks.push_back(block);
    ++expect;
  }
  return blocks;
}

// Stable-key JSON export for external tools; block values stay 1-based.
inline std::string plan_to_json(const LayerAssignment& a) {
  std::ostringstream out;
  out << "{\"total_layers\":" << a.total_layers
      << ",\"independent_layers\":" << a.independent_layers
      << ",\"strategy\":\"" << to_string(a.strategy) << "\""
      << ",\"blocks\":[";
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    if (i) out << ',';
    out << a.blocks[i];
  }
  out << "]}";
  return out.str();
}

}  // namespace shareformer
