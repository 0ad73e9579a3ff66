#pragma once

// "SNCK" checkpoint: magic, u16 version, u32 JSON length + JSON (model config
// and training metadata), u32 n_tensors; per tensor: u16 name length + name,
// u8 rank, u32 dims[rank], f32 data.

#include <nlohmann/json.hpp>

#include <cstring>
#include <string>
#include <vector>

#include "sourcenet/container.hpp"
#include "sourcenet/errors.hpp"
#include "sourcenet/features.hpp"
#include "sourcenet/nn/model.hpp"

namespace sourcenet::nn {

inline constexpr char kCkptMagic[4] = {'S', 'N', 'C', 'K'};
inline constexpr std::uint16_t kCkptVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  io::Writer w;
  w.bytes(kCkptMagic, 4);
  w.put<std::uint16_t>(kCkptVersion);
  nlohmann::json head = {{"model", ck.config}, {"meta", ck.meta}};
  const std::string blob = head.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blob.size()));
  w.bytes(blob.data(), blob.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.name.size() > 0xffff || t.value.shape.size() > 0xff)
      throw InvariantError("tensor name or rank too large: " + t.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.value.shape.size()));
    for (auto d : t.value.shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.array(t.value.ptr(), t.value.data.size());
  }
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  io::Reader in(std::move(bytes));
  char magic[4];
  in.array(magic, 4, "magic");
  if (std::memcmp(magic, kCkptMagic, 4) != 0) throw FormatError("bad magic (not a checkpoint)");
  const auto version = in.get<std::uint16_t>("version");
  if (version != kCkptVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = in.get<std::uint32_t>("header length");
  const std::string blob = in.string(len, "header");
  Checkpoint ck;
  try {
    const auto head = nlohmann::json::parse(blob);
    ck.config = head.at("model").get<ModelConfig>();
    ck.meta = head.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  const auto n = in.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor t;
    const auto nl = in.get<std::uint16_t>("tensor name length");
    t.name = in.string(nl, "tensor name");
    const auto rank = in.get<std::uint8_t>("tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.get<std::uint32_t>("tensor dims");
    t.value = Tensor<float>(shape);
    in.array(t.value.ptr(), t.value.data.size(), "tensor data");
    ck.tensors.push_back(std::move(t));
  }
  if (!in.at_end()) throw FormatError("trailing bytes in checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path));
}

template <class T>
std::vector<NamedTensor> export_params(const Model<T>& m, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  for (const auto& p : m.params()) {
    NamedTensor t{prefix + p.name, Tensor<float>(p.value.shape)};
    for (std::size_t k = 0; k < p.value.data.size(); ++k) t.value.data[k] = static_cast<float>(p.value.data[k]);
    out.push_back(std::move(t));
  }
  return out;
}

/// Model with parameters taken from the checkpoint (names must all match).
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ck) {
  Model<T> m(ck.config);
  for (auto& p : m.params()) {
    const NamedTensor* t = ck.find(p.name);
    if (!t) throw ConfigMismatch("checkpoint lacks parameter " + p.name);
    if (t->value.shape != p.value.shape)
      throw ConfigMismatch("shape mismatch for " + p.name + ": " + shape_str(t->value.shape) +
                           " vs " + shape_str(p.value.shape));
    for (std::size_t k = 0; k < p.value.data.size(); ++k) p.value.data[k] = static_cast<T>(t->value.data[k]);
  }
  return m;
}

inline nlohmann::json norm_to_json(const NormStats& s) {
  return {{"mean", s.mean},
          {"std", s.std},
          {"wave_scale", s.wave_scale},
          {"spec_scale", s.spec_scale},
          {"mode", s.mode == WaveNorm::Event ? "event" : "global"},
          {"degenerate", s.degenerate}};
}

inline NormStats norm_from_json(const nlohmann::json& j) {
  NormStats s;
  try {
    s.mean = j.at("mean").get<std::array<double, kScalarDim>>();
    s.std = j.at("std").get<std::array<double, kScalarDim>>();
    s.wave_scale = j.at("wave_scale").get<double>();
    s.spec_scale = j.at("spec_scale").get<double>();
    s.mode = j.at("mode").get<std::string>() == "event" ? WaveNorm::Event : WaveNorm::Global;
    s.degenerate = j.value("degenerate", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad normalization stats: ") + e.what());
  }
  return s;
}

}  // namespace sourcenet::nn
