// SPDX-License-Identifier: Apache-2.0
//
// Binary greyscale (P5) export of soft masks.
#pragma once

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskgen/numerics/tensor.hpp"
#include "maskgen/pipeline/tensor_file.hpp"

namespace maskgen {

/// Encodes an H x W mask (leading unit dimensions allowed) with
/// byte = round(255 m).
template <class T>
std::vector<char> encode_pgm(const Tensor<T>& mask) {
  const Shape& s = mask.shape();
  if (s.rank() < 2) throw DimensionError("PGM export needs a 2-D mask");
  for (std::size_t i = 0; i + 2 < s.rank(); ++i) {
    if (s[i] != 1) throw DimensionError("PGM export needs a single mask, got " + s.to_string());
  }
  const std::size_t h = s[s.rank() - 2], w = s[s.rank() - 1];
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> out(header.begin(), header.end());
  out.reserve(header.size() + h * w);
  for (T v : mask.data()) {
    if (!(v >= T(0) && v <= T(1))) throw std::invalid_argument("mask value outside [0, 1]");
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * static_cast<double>(v)))));
  }
  return out;
}

template <class T>
void export_pgm(const Tensor<T>& mask, const std::string& path) {
  const auto bytes = encode_pgm(mask);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TensorFileError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFileError("write to '" + path + "' failed");
}

/// One batch entry of a B x 1 x H x W mask as a 1 x 1 x H x W tensor.
template <class T>
Tensor<T> mask_slice(const Tensor<T>& mask, std::size_t index) {
  const Shape& s = mask.shape();
  if (s.rank() != 4 || s[1] != 1) throw DimensionError("expected a B x 1 x H x W mask");
  if (index >= s[0]) throw std::out_of_range("batch index out of range");
  const std::size_t plane = s[2] * s[3];
  const auto first = mask.storage().begin() + static_cast<std::ptrdiff_t>(index * plane);
  return Tensor<T>(Shape{1, 1, s[2], s[3]}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>(plane)));
}

}  // namespace maskgen
