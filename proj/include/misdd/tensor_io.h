#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace misdd {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian and written from memory directly");

/// Raw tensor file layout (all little-endian):
///
///   bytes 0-1   magic "MT"
///   byte  2     dtype code (see DType)
///   byte  3     rank (1..3)
///   bytes 4-15  three uint32 dims; unused trailing dims are 0
///
/// followed by the row-major payload.
enum class DType : std::uint8_t { kFloat32 = 1, kFloat64 = 2, kUInt8 = 3 };

inline constexpr std::size_t kTensorHeaderBytes = 16;
inline constexpr int kMaxTensorRank = 3;

std::size_t dtype_size(DType dtype);

class TensorFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RawTensor {
  DType dtype = DType::kFloat32;
  std::vector<std::uint32_t> dims;
  std::vector<std::byte> payload;

  std::size_t element_count() const;

  template <typename T>
  std::vector<T> as() const;
};

void write_tensor(std::ostream& out, DType dtype, std::span<const std::uint32_t> dims,
                  std::span<const std::byte> payload);
RawTensor read_tensor(std::istream& in);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::kUInt8; }

template <typename T>
void write_tensor(std::ostream& out, std::span<const std::uint32_t> dims, std::span<const T> values) {
  write_tensor(out, dtype_of<T>(), dims, std::as_bytes(values));
}

template <typename T>
std::vector<T> RawTensor::as() const {
  if (dtype != dtype_of<T>()) {
    throw TensorFormatError("tensor dtype mismatch: stored code " +
                            std::to_string(static_cast<int>(dtype)));
  }
  std::vector<T> out(element_count());
  std::memcpy(out.data(), payload.data(), payload.size());
  return out;
}

void write_tensor_file(const std::filesystem::path& path, DType dtype,
                       std::span<const std::uint32_t> dims, std::span<const std::byte> payload);
RawTensor read_tensor_file(const std::filesystem::path& path);

// Writes `bytes` to `path` through a sibling temp file and a rename, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const char> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace misdd
