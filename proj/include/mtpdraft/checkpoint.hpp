// Copyright 2026 The mtpdraft Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint container:
//   8 bytes   magic "MTPDCKPT"
//   u32       format version (1)
//   u64       header length in bytes
//   header    JSON {"kind", "config", "tensors": [{"name", "shape"}...]}
//   payload   raw little-endian float64 data of every tensor, header order
// Round trips are bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtpdraft/error.hpp"
#include "mtpdraft/model.hpp"

namespace mtpdraft {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim}, {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"rope_base", c.rope_base},
                     {"rms_eps", c.rms_eps},       {"seed", c.seed},           {"ffn_mult", c.ffn_mult}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.model_dim = j.value("model_dim", d.model_dim);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.rms_eps = j.value("rms_eps", d.rms_eps);
  c.seed = j.value("seed", d.seed);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
}

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'M', 'T', 'P', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

inline void write_container(const std::filesystem::path& path, const std::string& kind, const ModelConfig& config,
                            const std::vector<NamedConstTensor>& tensors) {
  nlohmann::json header;
  header["kind"] = kind;
  header["config"] = config;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_pod<std::uint32_t>(os, kCheckpointVersion);
  write_pod<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    os.write(reinterpret_cast<const char*>(t.tensor->ptr()), static_cast<std::streamsize>(t.tensor->size() * sizeof(double)));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path.string());
}

struct Container {
  std::string kind;
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("checkpoint: bad magic in " + path.string());
  }
  if (read_pod<std::uint32_t>(is) != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
  const auto len = read_pod<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  Container c;
  c.kind = header.at("kind").get<std::string>();
  c.config = header.at("config").get<ModelConfig>();
  for (const auto& t : header.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    std::vector<double> data(shape_numel(shape));
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated tensor payload");
    c.tensors.emplace_back(t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return c;
}

template <typename Module>
void assign_tensors(Module& m, Container& c) {
  auto params = named_parameters(m);
  if (params.size() != c.tensors.size()) throw IoError("checkpoint: tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != c.tensors[i].first) {
      throw IoError("checkpoint: expected tensor " + params[i].name + ", found " + c.tensors[i].first);
    }
    if (params[i].tensor->shape() != c.tensors[i].second.shape()) {
      throw IoError("checkpoint: shape mismatch for " + params[i].name);
    }
    *params[i].tensor = std::move(c.tensors[i].second);
  }
}

}  // namespace detail

inline void save_main(const MainModel& m, const std::filesystem::path& path) {
  detail::write_container(path, "main", m.config, named_parameters(m));
}

inline void save_head(const MTPHead& h, const std::filesystem::path& path) {
  detail::write_container(path, "mtp_head", h.config, named_parameters(h));
}

inline MainModel load_main(const std::filesystem::path& path) {
  auto c = detail::read_container(path);
  if (c.kind != "main") throw IoError("checkpoint: " + path.string() + " is not a main model");
  MainModel m = init_main(c.config);
  detail::assign_tensors(m, c);
  return m;
}

inline MTPHead load_head(const std::filesystem::path& path) {
  auto c = detail::read_container(path);
  if (c.kind != "mtp_head") throw IoError("checkpoint: " + path.string() + " is not an MTP head");
  MTPHead h = init_head(c.config, c.config.seed);
  detail::assign_tensors(h, c);
  return h;
}

}  // namespace mtpdraft
