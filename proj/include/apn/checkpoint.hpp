#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "apn/tensor.hpp"

// Binary checkpoint format, fixed bit-exactly:
//
//   magic   7 bytes  "APNCKPT"
//   version 1 byte   0x01
//   then zero or more tensor records until end of file:
//     name_len  u32 little-endian
//     name      name_len bytes (UTF-8, no terminator)
//     dtype     u8   0 = float32, 1 = float64
//     rank      u8
//     extents   rank x u64 little-endian
//     data      product(extents) x sizeof(dtype) bytes, little-endian
//
// Records are written in the order given; loading preserves it.

namespace apn {

template <class T>
using StateDict = std::vector<std::pair<std::string, Tensor<T>>>;

namespace detail {

constexpr char kCheckpointMagic[7] = {'A', 'P', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kCheckpointVersion = 1;

template <class T> struct dtype_tag;
template <> struct dtype_tag<float> { static constexpr std::uint8_t value = 0; };
template <> struct dtype_tag<double> { static constexpr std::uint8_t value = 1; };

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

template <class T>
void put_value(std::ostream& os, T v) {
  if constexpr (sizeof(T) == 4) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
  }
}

template <class T>
T get_value(std::istream& is) {
  T v;
  if constexpr (sizeof(T) == 4) {
    std::uint32_t bits = get_u32(is);
    std::memcpy(&v, &bits, 4);
  } else {
    std::uint64_t bits = get_u64(is);
    std::memcpy(&v, &bits, 8);
  }
  return v;
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const StateDict<T>& state) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  os.put(char(detail::kCheckpointVersion));
  for (const auto& [name, tensor] : state) {
    detail::put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(detail::dtype_tag<T>::value));
    os.put(char(tensor.rank()));
    for (std::size_t e : tensor.shape()) detail::put_u64(os, e);
    for (T v : tensor.value()) detail::put_value(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

template <class T>
StateDict<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[sizeof(detail::kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
  const int version = is.get();
  if (version != detail::kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  StateDict<T> state;
  while (is.peek() != std::char_traits<char>::eof()) {
    const std::uint32_t name_len = detail::get_u32(is);
    if (!is) throw std::runtime_error("checkpoint: truncated record header in '" + path + "'");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dtype = is.get();
    if (dtype != detail::dtype_tag<T>::value)
      throw std::runtime_error("checkpoint: tensor '" + name + "' has dtype tag " +
                               std::to_string(dtype) + ", expected " +
                               std::to_string(int(detail::dtype_tag<T>::value)));
    const int rank = is.get();
    Shape shape(static_cast<std::size_t>(rank), 0);
    for (auto& e : shape) e = std::size_t(detail::get_u64(is));
    std::vector<T> data(shape_numel(shape));
    for (auto& v : data) v = detail::get_value<T>(is);
    if (!is) throw std::runtime_error("checkpoint: truncated tensor '" + name + "' in '" + path + "'");
    state.emplace_back(std::move(name), Tensor<T>::from_data(shape, std::move(data)));
  }
  return state;
}

template <class T>
const Tensor<T>& checkpoint_get(const StateDict<T>& state, const std::string& name) {
  for (const auto& [n, t] : state)
    if (n == name) return t;
  throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
}

}  // namespace apn
