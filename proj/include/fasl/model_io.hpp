/*
 * Copyright 2026 The FASL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Model files.
//
//   "FASLMDL1" | u32 version (1) | u8 kind (0 = LT, 1 = LR)
//   u32 |L| | |L| x (str name, str description)
//   str encoder_id | u32 dim
//   config: u64 epochs | f64 learning_rate | f64 l2_to_init | f64 scale |
//           f64 lr_l2 | u64 max_iter | f64 lr_step | f64 lr_tolerance |
//           u8 lr_include_descriptions | u64 seed
//   LT: matrix label_matrix | matrix init_matrix
//   LR: matrix weights | matrix bias (|L| x 1)
//
// str is u32 length + bytes; a matrix is u32 rows | u32 cols | row-major f32.
// Everything little-endian.

#include <filesystem>
#include <fstream>
#include <string>

#include "fasl/binary_io.hpp"
#include "fasl/fsl.hpp"

namespace fasl {

namespace detail {

inline void write_matrix(binary::Writer& w, const Eigen::MatrixXd& m) {
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f32(static_cast<float>(m(i, j)));
  }
}

inline Eigen::MatrixXd read_matrix(binary::Reader& r) {
  const auto rows = r.u32();
  const auto cols = r.u32();
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<double>(r.f32());
  }
  return m;
}

}  // namespace detail

inline std::string serialize_model(const FewShotModel& model) {
  binary::Writer w;
  w.raw("FASLMDL1");
  w.u32(1);
  w.u8(kind_of(model) == ModelKind::label_tuning ? 0 : 1);
  const auto& labels = labels_of(model);
  w.u32(static_cast<std::uint32_t>(labels.size()));
  for (const auto& e : labels.entries()) {
    w.str(e.name);
    w.str(e.description);
  }
  const auto& enc = encoder_of(model);
  w.str(enc.encoder_id);
  w.u32(static_cast<std::uint32_t>(enc.dim));
  const auto& c = config_of(model);
  w.u64(c.epochs);
  w.f64(c.learning_rate);
  w.f64(c.l2_to_init);
  w.f64(c.scale);
  w.f64(c.lr_l2);
  w.u64(c.max_iter);
  w.f64(c.lr_step);
  w.f64(c.lr_tolerance);
  w.u8(c.lr_include_descriptions ? 1 : 0);
  w.u64(c.seed);
  if (const auto* lt = std::get_if<LabelTuningModel>(&model)) {
    detail::write_matrix(w, lt->label_matrix);
    detail::write_matrix(w, lt->init_matrix);
  } else {
    const auto& lr = std::get<LogRegModel>(model);
    detail::write_matrix(w, lr.weights);
    detail::write_matrix(w, lr.bias);
  }
  return w.take();
}

inline FewShotModel deserialize_model(std::string_view bytes) {
  binary::Reader r(bytes);
  if (r.raw(8) != "FASLMDL1") throw IoError("not a model file");
  if (const auto version = r.u32(); version != 1) {
    throw IoError("unsupported model file version " + std::to_string(version));
  }
  const auto kind = r.u8();
  if (kind > 1) throw IoError("unknown model kind in file");
  std::vector<LabelEntry> entries(r.u32());
  for (auto& e : entries) {
    e.name = r.str();
    e.description = r.str();
  }
  LabelSet labels(std::move(entries));
  EncoderDescriptor enc;
  enc.encoder_id = r.str();
  enc.dim = r.u32();
  TrainConfig c;
  c.epochs = r.u64();
  c.learning_rate = r.f64();
  c.l2_to_init = r.f64();
  c.scale = r.f64();
  c.lr_l2 = r.f64();
  c.max_iter = r.u64();
  c.lr_step = r.f64();
  c.lr_tolerance = r.f64();
  c.lr_include_descriptions = r.u8() != 0;
  c.seed = r.u64();
  auto check_shape = [&](const Eigen::MatrixXd& m, std::size_t rows, std::size_t cols) {
    if (static_cast<std::size_t>(m.rows()) != rows || static_cast<std::size_t>(m.cols()) != cols) {
      throw IoError("model matrix has the wrong shape");
    }
  };
  FewShotModel out;
  if (kind == 0) {
    LabelTuningModel m{labels, enc, detail::read_matrix(r), {}, c};
    m.init_matrix = detail::read_matrix(r);
    check_shape(m.label_matrix, labels.size(), enc.dim);
    check_shape(m.init_matrix, labels.size(), enc.dim);
    out = std::move(m);
  } else {
    LogRegModel m{labels, enc, detail::read_matrix(r), {}, c};
    const Eigen::MatrixXd bias = detail::read_matrix(r);
    check_shape(m.weights, labels.size(), enc.dim);
    check_shape(bias, labels.size(), 1);
    m.bias = bias.col(0);
    out = std::move(m);
  }
  if (!r.done()) throw IoError("trailing bytes in model file");
  return out;
}

inline void save_model(const std::filesystem::path& path, const FewShotModel& model) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("cannot write model file " + path.string());
}

inline FewShotModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read model file " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace fasl
