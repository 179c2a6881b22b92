#include "pfa/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

namespace pfa {
namespace {

constexpr char kMagic[4] = {'P', 'F', 'A', 'T'};
constexpr std::uint8_t kVersion = 1;
constexpr std::size_t kMaxRank = 8;

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t take_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

template <typename T>
bool NdArray<T>::all_finite() const {
  for (T v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

template struct NdArray<float>;
template struct NdArray<double>;

Dtype tensor_dtype(const TensorData& t) {
  return std::holds_alternative<NdArray<float>>(t) ? Dtype::F32 : Dtype::F64;
}

const std::vector<std::size_t>& tensor_shape(const TensorData& t) {
  return std::visit([](const auto& a) -> const std::vector<std::size_t>& { return a.shape; }, t);
}

std::size_t tensor_numel(const TensorData& t) {
  return std::visit([](const auto& a) { return a.numel(); }, t);
}

bool tensor_all_finite(const TensorData& t) {
  return std::visit([](const auto& a) { return a.all_finite(); }, t);
}

NdArray<double> tensor_to_f64(const TensorData& t) {
  if (const auto* d = std::get_if<NdArray<double>>(&t)) return *d;
  const auto& f = std::get<NdArray<float>>(t);
  NdArray<double> out(f.shape);
  for (std::size_t i = 0; i < f.data.size(); ++i) out.data[i] = f.data[i];
  return out;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

TensorData read_tensor_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec))
    fail(ErrorCode::MissingFile, "tensor file not found: " + path.string());

  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open tensor file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof())
    fail(ErrorCode::IoError, "read failed: " + path.string());

  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 7 || std::memcmp(p, kMagic, 4) != 0)
    fail(ErrorCode::ParseError, "not a tensor file (bad magic): " + path.string());
  if (p[4] != kVersion)
    fail(ErrorCode::ParseError,
         "unsupported tensor format version " + std::to_string(p[4]) + " in " + path.string());
  const std::uint8_t dtype_byte = p[5];
  if (dtype_byte > 1)
    fail(ErrorCode::UnsupportedDtype,
         "unknown dtype code " + std::to_string(dtype_byte) + " in " + path.string());
  const Dtype dtype = static_cast<Dtype>(dtype_byte);
  const std::size_t rank = p[6];
  if (rank == 0 || rank > kMaxRank)
    fail(ErrorCode::ParseError, "bad tensor rank " + std::to_string(rank) + " in " + path.string());
  if (n < 7 + 8 * rank)
    fail(ErrorCode::ParseError, "truncated tensor header: " + path.string());

  std::vector<std::size_t> shape(rank);
  std::size_t numel = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint64_t d = take_u64(p + 7 + 8 * i);
    if (d == 0)
      fail(ErrorCode::ParseError, "zero-sized dimension in " + path.string());
    if (d > (std::uint64_t{1} << 40) || numel > (std::size_t{1} << 40) / d)
      fail(ErrorCode::ParseError, "implausibly large tensor in " + path.string());
    shape[i] = static_cast<std::size_t>(d);
    numel *= shape[i];
  }

  const std::size_t payload = n - (7 + 8 * rank);
  const std::size_t have = payload / dtype_size(dtype);
  if (payload % dtype_size(dtype) != 0 || have != numel)
    fail(ErrorCode::ShapeMismatch,
         path.string() + ": header declares " + shape_to_string(shape) + " (" +
             std::to_string(numel) + " elements) but file holds " + std::to_string(have));

  const char* body = bytes.data() + 7 + 8 * rank;
  TensorData out;
  if (dtype == Dtype::F32) {
    NdArray<float> a(shape);
    std::memcpy(a.data.data(), body, payload);
    out = std::move(a);
  } else {
    NdArray<double> a(shape);
    std::memcpy(a.data.data(), body, payload);
    out = std::move(a);
  }
  if (!tensor_all_finite(out))
    fail(ErrorCode::NonFiniteTensor, "non-finite value in tensor file: " + path.string());
  return out;
}

void write_tensor_file(const std::filesystem::path& path, const TensorData& t) {
  const auto& shape = tensor_shape(t);
  if (shape.empty()) fail(ErrorCode::ShapeError, "cannot write rank-0 tensor");
  if (shape.size() > kMaxRank) fail(ErrorCode::ShapeError, "tensor rank exceeds 8");
  for (std::size_t d : shape)
    if (d == 0) fail(ErrorCode::ShapeError, "cannot write tensor with a zero-sized dimension");

  std::string bytes;
  bytes.reserve(7 + 8 * shape.size() + tensor_numel(t) * dtype_size(tensor_dtype(t)));
  bytes.append(kMagic, 4);
  bytes.push_back(static_cast<char>(kVersion));
  bytes.push_back(static_cast<char>(tensor_dtype(t)));
  bytes.push_back(static_cast<char>(shape.size()));
  for (std::size_t d : shape) append_u64(bytes, d);
  std::visit(
      [&](const auto& a) {
        const char* raw = reinterpret_cast<const char*>(a.data.data());
        bytes.append(raw, a.data.size() * sizeof(a.data[0]));
      },
      t);
  write_file_atomic(path, bytes);
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot open for writing: " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail(ErrorCode::IoError, "write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorCode::IoError, "rename failed for " + path.string() + ": " + ec.message());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::exists(path, ec))
    fail(ErrorCode::MissingFile, "file not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open: " + path.string());
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace pfa
