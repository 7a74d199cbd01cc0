#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrefine/nn/tensor.hpp"

namespace qrefine::nn {

/// Checkpoint container, version 1. All integers and floats little-endian.
///
///   bytes 0..7   magic "QRFCKPT\0"
///   u32          format version (1)
///   u32          metadata length L, then L bytes of UTF-8 metadata (JSON by convention)
///   u32          tensor count T, then T records:
///                  u32 name length, name bytes,
///                  u32 rank (always 2), u64 rows, u64 cols,
///                  rows*cols IEEE-754 binary64 values in row-major order
inline constexpr char kCheckpointMagic[8] = {'Q', 'R', 'F', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<real> values;
};

struct Checkpoint {
  std::string meta;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put(std::ostream& os, T v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError(path + ": truncated checkpoint");
  return to_le(v);
}

inline std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get<std::uint32_t>(is, path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw CheckpointError(path + ": truncated checkpoint");
  return s;
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.meta.size()));
  os.write(ck.meta.data(), static_cast<std::streamsize>(ck.meta.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put<std::uint32_t>(os, 2);
    detail::put<std::uint64_t>(os, t.shape.rows);
    detail::put<std::uint64_t>(os, t.shape.cols);
    for (real v : t.values) detail::put<real>(os, v);
  }
  if (!os) throw CheckpointError("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError(path + ": not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.meta = detail::get_string(is, path);
  const auto count = detail::get<std::uint32_t>(is, path);
  ck.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = detail::get_string(is, path);
    const auto rank = detail::get<std::uint32_t>(is, path);
    if (rank != 2) throw CheckpointError(path + ": tensor " + t.name + " has rank " + std::to_string(rank));
    t.shape.rows = detail::get<std::uint64_t>(is, path);
    t.shape.cols = detail::get<std::uint64_t>(is, path);
    t.values.resize(t.shape.size());
    for (auto& v : t.values) v = detail::get<real>(is, path);
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

inline Checkpoint snapshot(const ParameterList& params, std::string meta = {}) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  for (const auto* p : params)
    ck.tensors.push_back({p->name(), p->shape(), {p->values().begin(), p->values().end()}});
  return ck;
}

/// Copies values into `params` by name; every parameter must be present with a matching shape.
inline void restore(const Checkpoint& ck, const ParameterList& params) {
  for (auto* p : params) {
    const NamedTensor* t = ck.find(p->name());
    if (!t) throw CheckpointError("checkpoint is missing parameter " + p->name());
    if (!(t->shape == p->shape()))
      throw CheckpointError("parameter " + p->name() + ": checkpoint shape " + to_string(t->shape) +
                            " vs model shape " + to_string(p->shape()));
    std::copy(t->values.begin(), t->values.end(), p->values().begin());
  }
}

}  // namespace qrefine::nn
