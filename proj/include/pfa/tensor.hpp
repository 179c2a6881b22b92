#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pfa/error.hpp"

namespace pfa {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }
const char* dtype_name(Dtype d);

// Dense row-major n-dimensional array. Activations use [M,H,W,C] (samples,
// height, width, channels) and conv kernels [fh,fw,Cin,Cout].
template <typename T>
struct NdArray {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  NdArray() = default;
  explicit NdArray(std::vector<std::size_t> s)
      : shape(std::move(s)), data(numel_of(shape)) {}
  NdArray(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      fail(ErrorCode::ShapeMismatch, "element count does not match shape");
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  T& operator()(std::size_t i) { return data[i]; }
  const T& operator()(std::size_t i) const { return data[i]; }
  T& operator()(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data[i * shape[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k,
                      std::size_t l) const {
    return data[((i * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool all_finite() const;
};

using TensorData = std::variant<NdArray<float>, NdArray<double>>;

Dtype tensor_dtype(const TensorData& t);
const std::vector<std::size_t>& tensor_shape(const TensorData& t);
std::size_t tensor_numel(const TensorData& t);
bool tensor_all_finite(const TensorData& t);
NdArray<double> tensor_to_f64(const TensorData& t);

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Binary tensor file: magic "PFAT", then u8 version (=1), u8 dtype
// (0 = f32, 1 = f64), u8 rank, rank little-endian u64 dims, and the raw
// little-endian payload. Readers reject truncated or oversized payloads and
// any non-finite value.
TensorData read_tensor_file(const std::filesystem::path& path);
void write_tensor_file(const std::filesystem::path& path, const TensorData& t);

// Writes via a temp file in the same directory followed by a rename, so an
// interrupted run never leaves a half-written artifact behind.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace pfa
