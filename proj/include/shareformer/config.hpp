// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Plain `key = value` config text with [model] / [train] / [task] / [bench]
// sections. Parse errors carry file and line number.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shareformer/model.hpp"
#include "shareformer/train.hpp"

namespace shareformer {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigFile {
 public:
  static ConfigFile parse_string(const std::string& text, const std::string& origin = "<string>") {
    ConfigFile cf;
    cf.origin_ = origin;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string s = strip(line);
      if (s.empty() || s[0] == '#' || s[0] == ';') continue;
      if (s.front() == '[') {
        if (s.back() != ']' || s.size() < 3) {
          throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
        }
        section = strip(s.substr(1, s.size() - 2));
        continue;
      }
      const auto eq = s.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      }
      const std::string key = strip(s.substr(0, eq));
      const std::string value = strip(s.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      }
      cf.entries_[section + "." + key] = value;
    }
    return cf;
  }

  static ConfigFile parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    ConfigFile cf = parse_string(buf.str(), path);
    cf.dir_ = std::filesystem::path(path).parent_path().string();
    return cf;
  }

  bool has(const std::string& section, const std::string& key) const {
    return entries_.count(section + "." + key) > 0;
  }

  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const {
    auto it = entries_.find(section + "." + key);
    return it == entries_.end() ? fallback : it->second;
  }

  std::string require(const std::string& section, const std::string& key) const {
    auto it = entries_.find(section + "." + key);
    if (it == entries_.end()) {
      throw ConfigError(origin_ + ": missing required key [" + section + "] " + key);
    }
    return it->second;
  }

  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t fallback) const {
    if (!has(section, key)) return fallback;
    return to_int(section, key, get(section, key, ""));
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": [" + section + "] " + key + " = '" + v + "' is not a number");
    }
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(origin_ + ": [" + section + "] " + key + " = '" + v + "' is not a boolean");
  }

  // whitespace- or comma-separated list
  std::vector<std::string> get_list(const std::string& section, const std::string& key) const {
    std::vector<std::string> out;
    std::string v = get(section, key, "");
    for (char& c : v)
      if (c == ',') c = ' ';
    std::istringstream in(v);
    std::string item;
    while (in >> item) out.push_back(item);
    return out;
  }

  const std::string& origin() const { return origin_; }
  const std::string& dir() const { return dir_; }

  // path relative to the config file's directory
  std::string resolve_path(const std::string& p) const {
    if (p.empty() || p.front() == '/' || dir_.empty()) return p;
    return (std::filesystem::path(dir_) / p).string();
  }

 private:
  static std::string strip(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  std::int64_t to_int(const std::string& section, const std::string& key,
                      const std::string& v) const {
    try {
      std::size_t used = 0;
      const long long i = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return i;
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": [" + section + "] " + key + " = '" + v +
                        "' is not an integer");
    }
  }

  std::string origin_ = "<none>";
  std::string dir_;
  std::map<std::string, std::string> entries_;
};

inline ModelConfig model_config_from(const ConfigFile& cf) {
  ModelConfig c;
  c.d_model = static_cast<int>(cf.get_int("model", "d_model", c.d_model));
  c.n_heads = static_cast<int>(cf.get_int("model", "n_heads", c.n_heads));
  c.d_ff = static_cast<int>(cf.get_int("model", "d_ff", c.d_ff));
  c.vocab_size = static_cast<int>(cf.get_int("model", "vocab_size", c.vocab_size));
  c.enc_layers = static_cast<int>(cf.get_int("model", "enc_layers", c.enc_layers));
  c.dec_layers = static_cast<int>(cf.get_int("model", "dec_layers", c.dec_layers));
  c.enc_blocks = static_cast<int>(cf.get_int("model", "enc_blocks", c.enc_blocks));
  c.dec_blocks = static_cast<int>(cf.get_int("model", "dec_blocks", c.dec_blocks));
  if (cf.has("model", "strategy")) c.strategy = strategy_from_string(cf.get("model", "strategy", ""));
  if (cf.has("model", "ln_placement")) {
    c.ln_placement = ln_placement_from_string(cf.get("model", "ln_placement", ""));
  }
  c.admin = cf.get_bool("model", "admin", c.admin);
  c.tie_embeddings = cf.get_bool("model", "tie_embeddings", c.tie_embeddings);
  c.dropout = cf.get_double("model", "dropout", c.dropout);
  c.max_len = static_cast<int>(cf.get_int("model", "max_len", c.max_len));
  c.pad_id = static_cast<int>(cf.get_int("model", "pad_id", c.pad_id));
  c.bos_id = static_cast<int>(cf.get_int("model", "bos_id", c.bos_id));
  c.eos_id = static_cast<int>(cf.get_int("model", "eos_id", c.eos_id));
  return c;
}

inline std::string model_config_to_text(const ModelConfig& c) {
  std::ostringstream out;
  out << "[model]\n"
      << "d_model = " << c.d_model << "\n"
      << "n_heads = " << c.n_heads << "\n"
      << "d_ff = " << c.d_ff << "\n"
      << "vocab_size = " << c.vocab_size << "\n"
      << "enc_layers = " << c.enc_layers << "\n"
      << "dec_layers = " << c.dec_layers << "\n"
      << "enc_blocks = " << c.enc_blocks << "\n"
      << "dec_blocks = " << c.dec_blocks << "\n"
      << "strategy = " << to_string(c.strategy) << "\n"
      << "ln_placement = " << to_string(c.ln_placement) << "\n"
      << "admin = " << (c.admin ? "true" : "false") << "\n"
      << "tie_embeddings = " << (c.tie_embeddings ? "true" : "false") << "\n"
      << "dropout = " << c.dropout << "\n"
      << "max_len = " << c.max_len << "\n"
      << "pad_id = " << c.pad_id << "\n"
      << "bos_id = " << c.bos_id << "\n"
      << "eos_id = " << c.eos_id << "\n";
  return out.str();
}

inline TrainConfig train_config_from(const ConfigFile& cf) {
  TrainConfig t;
  t.lr_scale = cf.get_double("train", "lr_scale", t.lr_scale);
  t.warmup_steps = cf.get_int("train", "warmup_steps", t.warmup_steps);
  t.beta1 = cf.get_double("train", "beta1", t.beta1);
  t.beta2 = cf.get_double("train", "beta2", t.beta2);
  t.adam_eps = cf.get_double("train", "adam_eps", t.adam_eps);
  t.label_smoothing = cf.get_double("train", "label_smoothing", t.label_smoothing);
  t.batch_tokens = static_cast<int>(cf.get_int("train", "batch_tokens", t.batch_tokens));
  t.max_steps = cf.get_int("train", "max_steps", t.max_steps);
  t.eval_interval = cf.get_int("train", "eval_interval", t.eval_interval);
  t.seed = static_cast<std::uint64_t>(cf.get_int("train", "seed", static_cast<std::int64_t>(t.seed)));
  t.precision = cf.get("train", "precision", t.precision);
  t.clip_norm = cf.get_double("train", "clip_norm", t.clip_norm);
  t.valid_batches = static_cast<int>(cf.get_int("train", "valid_batches", t.valid_batches));
  t.deterministic = cf.get_bool("train", "deterministic", t.deterministic);
  return t;
}

inline std::string train_config_to_text(const TrainConfig& t) {
  std::ostringstream out;
  out << "[train]\n"
      << "lr_scale = " << t.lr_scale << "\n"
      << "warmup_steps = " << t.warmup_steps << "\n"
      << "beta1 = " << t.beta1 << "\n"
      << "beta2 = " << t.beta2 << "\n"
      << "adam_eps = " << t.adam_eps << "\n"
      << "label_smoothing = " << t.label_smoothing << "\n"
      << "batch_tokens = " << t.batch_tokens << "\n"
      << "max_steps = " << t.max_steps << "\n"
      << "eval_interval = " << t.eval_interval << "\n"
      << "seed = " << t.seed << "\n"
      << "precision = " << t.precision << "\n"
      << "clip_norm = " << t.clip_norm << "\n"
      << "valid_batches = " << t.valid_batches << "\n"
      << "deterministic = " << (t.deterministic ? "true" : "false") << "\n";
  return out.str();
}

// Reads BOS/EOS/PAD ids and the vocab size from a metadata file of
// `name = id` lines (keys: pad, bos, eos, size).
struct VocabMeta {
  int pad_id = 0, bos_id = 1, eos_id = 2, size = 0;
};

inline VocabMeta vocab_meta_from_file(const std::string& path) {
  ConfigFile cf = ConfigFile::parse_file(path);
  VocabMeta v;
  v.pad_id = static_cast<int>(cf.get_int("", "pad", v.pad_id));
  v.bos_id = static_cast<int>(cf.get_int("", "bos", v.bos_id));
  v.eos_id = static_cast<int>(cf.get_int("", "eos", v.eos_id));
  v.size = static_cast<int>(cf.get_int("", "size", 0));
  if (v.size < 1) throw ConfigError(path + ": vocab metadata needs a positive 'size'");
  return v;
}

inline SynthTask task_from(const ConfigFile& cf) {
  SynthTask t;
  t.kind = task_kind_from_string(cf.get("task", "kind", "copy"));
  t.vocab_size = static_cast<int>(cf.get_int("task", "vocab_size", t.vocab_size));
  t.len_min = static_cast<int>(cf.get_int("task", "len_min", t.len_min));
  t.len_max = static_cast<int>(cf.get_int("task", "len_max", t.len_max));
  t.seed = static_cast<std::uint64_t>(cf.get_int("task", "seed", static_cast<std::int64_t>(t.seed)));
  t.pad_id = static_cast<int>(cf.get_int("task", "pad_id", t.pad_id));
  t.bos_id = static_cast<int>(cf.get_int("task", "bos_id", t.bos_id));
  t.eos_id = static_cast<int>(cf.get_int("task", "eos_id", t.eos_id));
  if (t.kind == TaskKind::kFile) {
    t.file_src = load_token_lines(cf.resolve_path(cf.require("task", "src_data")));
    t.file_tgt = load_token_lines(cf.resolve_path(cf.require("task", "tgt_data")));
    if (t.file_src.size() != t.file_tgt.size()) {
      throw ConfigError("file task: src and tgt line counts differ");
    }
    if (cf.has("task", "vocab")) {
      const VocabMeta v = vocab_meta_from_file(cf.resolve_path(cf.get("task", "vocab", "")));
      t.vocab_size = v.size;
      t.pad_id = v.pad_id;
      t.bos_id = v.bos_id;
      t.eos_id = v.eos_id;
    }
  }
  if (t.len_min < 1 || t.len_max < t.len_min) throw ConfigError("bad task length range");
  return t;
}

inline std::string task_to_text(const SynthTask& t) {
  std::ostringstream out;
  out << "[task]\n"
      << "kind = " << to_string(t.kind) << "\n"
      << "vocab_size = " << t.vocab_size << "\n"
      << "len_min = " << t.len_min << "\n"
      << "len_max = " << t.len_max << "\n"
      << "seed = " << t.seed << "\n"
      << "pad_id = " << t.pad_id << "\n"
      << "bos_id = " << t.bos_id << "\n"
      << "eos_id = " << t.eos_id << "\n";
  return out.str();
}

}  // namespace shareformer
