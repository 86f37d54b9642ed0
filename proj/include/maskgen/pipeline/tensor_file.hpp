// SPDX-License-Identifier: Apache-2.0
//
// GRCT tensor files: "GRCT", version u8, dtype u8 (0 f32, 1 f64), rank u8,
// rank x u32 LE dims, then the row-major payload in little-endian order.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "maskgen/numerics/tensor.hpp"

namespace maskgen {

class TensorFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline constexpr std::uint8_t kGrctVersion = 1;

namespace detail {

template <class U>
void put_le(std::vector<char>& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <class T>
using BitsOf = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

}  // namespace detail

template <class T>
std::vector<char> encode_tensor(const Tensor<T>& t) {
  std::vector<char> out{'G', 'R', 'C', 'T'};
  out.reserve(8 + 4 * t.rank() + sizeof(T) * t.size());
  out.push_back(static_cast<char>(kGrctVersion));
  out.push_back(static_cast<char>(detail::dtype_code<T>()));
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape().dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw TensorFileError("dimension exceeds u32");
    detail::put_le(out, static_cast<std::uint32_t>(d));
  }
  for (T v : t.data()) detail::put_le(out, std::bit_cast<detail::BitsOf<T>>(v));
  return out;
}

namespace detail {

template <class T>
Tensor<T> decode_payload(const unsigned char* p, Shape shape) {
  Tensor<T> t(shape);
  for (auto& v : t.data()) {
    v = std::bit_cast<T>(get_le<BitsOf<T>>(p));
    p += sizeof(T);
  }
  return t;
}

}  // namespace detail

inline AnyTensor decode_tensor(std::span<const char> bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 7 || std::memcmp(p, "GRCT", 4) != 0) throw TensorFileError("not a GRCT file (bad magic)");
  if (p[4] != kGrctVersion) throw TensorFileError("unsupported GRCT version " + std::to_string(p[4]));
  const std::uint8_t dtype = p[5];
  if (dtype > 1) throw TensorFileError("unknown GRCT dtype code " + std::to_string(dtype));
  const std::size_t rank = p[6];
  if (rank == 0 || rank > kMaxRank) throw TensorFileError("GRCT rank must be 1..4, got " + std::to_string(rank));
  if (n < 7 + 4 * rank) throw TensorFileError("truncated GRCT header");
  std::vector<std::size_t> dims(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = detail::get_le<std::uint32_t>(p + 7 + 4 * i);
    if (dims[i] != 0 && count > std::numeric_limits<std::size_t>::max() / 8 / dims[i]) {
      throw TensorFileError("GRCT dimensions overflow");
    }
    count *= dims[i];
  }
  const std::size_t header = 7 + 4 * rank;
  const std::size_t width = dtype == 0 ? 4 : 8;
  if (n - header != count * width) {
    throw TensorFileError("GRCT payload has " + std::to_string(n - header) + " bytes, expected " +
                          std::to_string(count * width));
  }
  const Shape shape{std::span<const std::size_t>(dims)};
  if (dtype == 0) return detail::decode_payload<float>(p + header, shape);
  return detail::decode_payload<double>(p + header, shape);
}

template <class T>
void write_tensor(const std::string& path, const Tensor<T>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFileError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFileError("write to '" + path + "' failed");
}

inline AnyTensor read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFileError("cannot open '" + path + "'");
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_tensor(bytes);
  } catch (const TensorFileError& e) {
    throw TensorFileError(path + ": " + e.what());
  }
}

/// Reads a GRCT file and converts it to T.
template <class T>
Tensor<T> read_tensor_as(const std::string& path) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, read_tensor(path));
}

}  // namespace maskgen
