#pragma once

// Binary array container used for model checkpoints.
//
//   "DWMR0001"                       8-byte magic
//   u32 little-endian                array count
//   per array:
//     u16 LE name length, name bytes (no terminator)
//     u8 dtype: 0 = f32, 1 = f64
//     u8 rank, then rank u32 LE dims
//     raw little-endian values, row-major
//
// Arrays are written in the order given, so a fixed collection order makes
// checkpoints byte-identical across runs with the same configuration.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dwmr/nn.hpp"
#include "dwmr/tensor.hpp"

namespace dwmr {

namespace detail {

inline void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {(unsigned char)(v & 0xff), (unsigned char)(v >> 8)};
  os.write(reinterpret_cast<const char*>(b), 2);
}
inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  is.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0]) | (uint16_t(b[1]) << 8);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

template <typename T>
constexpr uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const std::vector<NamedTensor<T>>& arrays) {
  std::ofstream os(path, std::ios::binary);
  check(bool(os), cat("checkpoint: cannot open ", path, " for writing"));
  os.write("DWMR0001", 8);
  detail::put_u32(os, uint32_t(arrays.size()));
  for (const auto& a : arrays) {
    check(a.name.size() <= 0xffff, cat("checkpoint: array name too long: ", a.name));
    detail::put_u16(os, uint16_t(a.name.size()));
    os.write(a.name.data(), std::streamsize(a.name.size()));
    os.put(char(detail::dtype_code<T>()));
    os.put(char(a.tensor.shape.size()));
    for (int d : a.tensor.shape) detail::put_u32(os, uint32_t(d));
    os.write(reinterpret_cast<const char*>(a.tensor.ptr()),
             std::streamsize(a.tensor.size() * sizeof(T)));
  }
  check(bool(os), cat("checkpoint: write to ", path, " failed"));
}

template <typename T>
std::vector<NamedTensor<T>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), cat("checkpoint: cannot open ", path));
  char magic[8];
  is.read(magic, 8);
  check(bool(is) && std::memcmp(magic, "DWMR0001", 8) == 0,
        cat("checkpoint: ", path, " is not a DWMR0001 container"));
  const uint32_t count = detail::get_u32(is);
  std::vector<NamedTensor<T>> arrays;
  arrays.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = detail::get_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const int dtype = is.get();
    check(dtype == 0 || dtype == 1, cat("checkpoint: bad dtype ", dtype, " for array ", name));
    const int rank = is.get();
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) shape[d] = int(detail::get_u32(is));
    Tensor<T> t = Tensor<T>::zeros(shape);
    if (dtype == detail::dtype_code<T>()) {
      is.read(reinterpret_cast<char*>(t.ptr()), std::streamsize(t.size() * sizeof(T)));
    } else if (dtype == 0) {  // stored f32, loading as f64
      std::vector<float> buf(t.size());
      is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
      for (size_t k = 0; k < buf.size(); ++k) t.ptr()[k] = T(buf[k]);
    } else {  // stored f64, loading as f32
      std::vector<double> buf(t.size());
      is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(double)));
      for (size_t k = 0; k < buf.size(); ++k) t.ptr()[k] = T(buf[k]);
    }
    check(bool(is), cat("checkpoint: ", path, " truncated while reading array ", name));
    arrays.push_back({std::move(name), std::move(t)});
  }
  return arrays;
}

}  // namespace dwmr
