// Copyright (c) 2026 The shareformer Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints: a structured-text manifest (config + layer assignments) next
// to per-tensor dumps in the text fixture format
//
//   tensor <name>
//   shape <d0> <d1> ...
//   <flat values, whitespace separated>
//
// Values are printed with enough digits to round-trip their precision.

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "shareformer/config.hpp"
#include "shareformer/model.hpp"

namespace shareformer {

namespace detail {

template <typename T>
const char* value_format();
template <>
inline const char* value_format<float>() { return "%.9g"; }
template <>
inline const char* value_format<double>() { return "%.17g"; }

}  // namespace detail

template <typename T>
void write_tensor_dump(std::ostream& out, const std::string& name, const Tensor<T>& t) {
  out << "tensor " << name << "\nshape";
  for (auto d : t.shape) out << ' ' << d;
  out << '\n';
  char buf[64];
  const T* v = t.v();
  const std::int64_t per_line = t.rank() >= 2 ? t.dim(t.rank() - 1) : t.numel();
  for (std::int64_t i = 0, n = t.numel(); i < n; ++i) {
    std::snprintf(buf, sizeof(buf), detail::value_format<T>(), static_cast<double>(v[i]));
    out << buf << ((i + 1) % per_line == 0 ? '\n' : ' ');
  }
}

template <typename T>
std::map<std::string, Tensor<T>> read_tensor_dumps(std::istream& in) {
  std::map<std::string, Tensor<T>> tensors;
  std::string word;
  while (in >> word) {
    if (word != "tensor") throw std::runtime_error("tensor dump: expected 'tensor', got '" + word + "'");
    std::string name;
    in >> name;
    in >> word;
    if (word != "shape") throw std::runtime_error("tensor dump: expected 'shape' after name");
    std::string line;
    std::getline(in, line);
    std::istringstream dims(line);
    Shape shape;
    std::int64_t d;
    while (dims >> d) shape.push_back(d);
    const std::int64_t n = shape_numel(shape);
    std::vector<T> values(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      double x;
      if (!(in >> x)) throw std::runtime_error("tensor dump: truncated values for '" + name + "'");
      values[static_cast<std::size_t>(i)] = static_cast<T>(x);
    }
    tensors[name] = Tensor<T>::from(shape, std::move(values));
  }
  return tensors;
}

inline std::string assignment_to_text(const LayerAssignment& enc, const LayerAssignment& dec) {
  std::ostringstream out;
  out << "[assignment]\nenc =";
  for (int b : enc.blocks) out << ' ' << b;
  out << "\ndec =";
  for (int b : dec.blocks) out << ' ' << b;
  out << '\n';
  return out.str();
}

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream manifest(dir + "/model.cfg");
    if (!manifest) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
    manifest << model_config_to_text(model.config)
             << assignment_to_text(model.enc_assignment, model.dec_assignment);
  }
  std::ofstream weights(dir + "/weights.txt");
  if (!weights) throw std::runtime_error("cannot write checkpoint weights in " + dir);
  model.store.for_each_param(
      [&](const std::string& name, Tensor<T>& t) { write_tensor_dump(weights, name, t); });
}

// Rebuilds the model from the manifest and loads every tensor, validating
// shapes against the freshly constructed store.
template <typename T>
Model<T> load_checkpoint(const std::string& dir) {
  std::ifstream manifest_in(dir + "/model.cfg");
  if (!manifest_in) throw std::runtime_error("cannot open checkpoint manifest in " + dir);
  std::ostringstream buf;
  buf << manifest_in.rdbuf();
  const ConfigFile cf = ConfigFile::parse_string(buf.str(), dir + "/model.cfg");
  const ModelConfig config = model_config_from(cf);
  Model<T> model = build_model<T>(config, /*seed=*/0);

  std::ifstream weights_in(dir + "/weights.txt");
  if (!weights_in) throw std::runtime_error("cannot open checkpoint weights in " + dir);
  std::map<std::string, Tensor<T>> tensors = read_tensor_dumps<T>(weights_in);

  model.store.for_each_param([&](const std::string& name, Tensor<T>& t) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint missing tensor '" + name + "'");
    if (it->second.shape != t.shape) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " +
                               shape_str(it->second.shape) + ", manifest expects " +
                               shape_str(t.shape));
    }
    *t.data = *it->second.data;
    tensors.erase(it);
  });
  if (!tensors.empty()) {
    throw std::runtime_error("checkpoint contains unexpected tensor '" + tensors.begin()->first + "'");
  }
  return model;
}

}  // namespace shareformer
