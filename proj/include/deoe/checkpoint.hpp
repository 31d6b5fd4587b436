#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "deoe/nn.hpp"

namespace deoe {

// Checkpoint layout (little-endian):
//   "DCP1" | u32 version | u64 config_hash | i64 iteration
//   u32 n_params, then per parameter:
//     u16 name_len | name | u8 ndim | i32 dims[] | f32 values[]
//   u8 has_adam; if set: i64 step_count, then per parameter f32 m[], f32 v[]
// Values are stored at 32-bit precision; training runs 32-bit and the
// 64-bit instantiation exists only for gradient checking.

namespace ckpt_detail {

template <typename T>
void put(std::ofstream& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return v;
}

template <typename Real>
void put_values(std::ofstream& out, const std::vector<Real>& v) {
  for (Real x : v) put(out, static_cast<float>(x));
}

template <typename Real>
void take_values(std::ifstream& in, std::vector<Real>& v,
                 const std::string& path) {
  for (auto& x : v) x = static_cast<Real>(take<float>(in, path));
}

}  // namespace ckpt_detail

template <typename Real>
void save_checkpoint(const std::string& path, const ParamStore<Real>& store,
                     const AdamState<Real>* adam, std::int64_t iteration,
                     std::uint64_t config_hash) {
  namespace d = ckpt_detail;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write("DCP1", 4);
  d::put<std::uint32_t>(out, 1);
  d::put<std::uint64_t>(out, config_hash);
  d::put<std::int64_t>(out, iteration);
  d::put<std::uint32_t>(out, static_cast<std::uint32_t>(store.params.size()));
  for (std::size_t i = 0; i < store.params.size(); ++i) {
    const auto& name = store.names[i];
    const auto& p = store.params[i];
    d::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    d::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.shape().size()));
    for (int dim : p.shape()) d::put<std::int32_t>(out, dim);
    d::put_values(out, p.values());
  }
  d::put<std::uint8_t>(out, adam ? 1 : 0);
  if (adam) {
    if (adam->m.size() != store.params.size())
      throw std::runtime_error("checkpoint: optimizer state size mismatch");
    d::put<std::int64_t>(out, adam->step_count);
    for (std::size_t i = 0; i < store.params.size(); ++i) {
      d::put_values(out, adam->m[i]);
      d::put_values(out, adam->v[i]);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Loads into an existing store; names and shapes must match exactly.
// Returns the stored iteration. `adam` may be null when the optimizer state
// is not needed (inference); a missing state with non-null `adam` is an
// error so resumed runs cannot silently restart the optimizer.
template <typename Real>
std::int64_t load_checkpoint(const std::string& path, ParamStore<Real>& store,
                             AdamState<Real>* adam,
                             std::uint64_t expected_config_hash) {
  namespace d = ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "DCP1", 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const auto version = d::take<std::uint32_t>(in, path);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version) + ": " + path);
  const auto hash = d::take<std::uint64_t>(in, path);
  if (hash != expected_config_hash)
    throw std::runtime_error("checkpoint config hash mismatch: " + path +
                             " was written by a different model config");
  const auto iteration = d::take<std::int64_t>(in, path);
  const auto n = d::take<std::uint32_t>(in, path);
  if (n != store.params.size())
    throw std::runtime_error("checkpoint parameter count mismatch: " + path);
  for (std::size_t i = 0; i < store.params.size(); ++i) {
    const auto name_len = d::take<std::uint16_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in || name != store.names[i])
      throw std::runtime_error("checkpoint parameter order mismatch at '" +
                               name + "' (expected '" + store.names[i] +
                               "'): " + path);
    const auto ndim = d::take<std::uint8_t>(in, path);
    Shape shape(ndim);
    for (auto& dim : shape) dim = d::take<std::int32_t>(in, path);
    if (shape != store.params[i].shape())
      throw std::runtime_error("checkpoint shape mismatch at '" + name +
                               "': " + path);
    d::take_values(in, store.params[i].values(), path);
  }
  const auto has_adam = d::take<std::uint8_t>(in, path);
  if (adam) {
    if (!has_adam)
      throw std::runtime_error("checkpoint has no optimizer state: " + path);
    adam->init(store);
    adam->step_count = d::take<std::int64_t>(in, path);
    for (std::size_t i = 0; i < store.params.size(); ++i) {
      d::take_values(in, adam->m[i], path);
      d::take_values(in, adam->v[i], path);
    }
  }
  return iteration;
}

}  // namespace deoe
