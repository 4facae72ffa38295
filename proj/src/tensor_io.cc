#include "misdd/tensor_io.h"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace misdd {

namespace fs = std::filesystem;

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::kFloat32:
      return 4;
    case DType::kFloat64:
      return 8;
    case DType::kUInt8:
      return 1;
  }
  throw TensorFormatError("unknown dtype code " + std::to_string(static_cast<int>(dtype)));
}

std::size_t RawTensor::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write_tensor(std::ostream& out, DType dtype, std::span<const std::uint32_t> dims,
                  std::span<const std::byte> payload) {
  if (dims.empty() || dims.size() > kMaxTensorRank) {
    throw TensorFormatError("tensor rank must be 1.." + std::to_string(kMaxTensorRank));
  }
  std::size_t count = 1;
  for (auto d : dims) count *= d;
  if (count * dtype_size(dtype) != payload.size()) {
    throw TensorFormatError("tensor payload size does not match dims");
  }
  std::array<unsigned char, kTensorHeaderBytes> header{};
  header[0] = 'M';
  header[1] = 'T';
  header[2] = static_cast<unsigned char>(dtype);
  header[3] = static_cast<unsigned char>(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    std::memcpy(header.data() + 4 + 4 * i, &dims[i], 4);
  }
  out.write(reinterpret_cast<const char*>(header.data()), header.size());
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("tensor write failed");
}

RawTensor read_tensor(std::istream& in) {
  std::array<unsigned char, kTensorHeaderBytes> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (in.gcount() != static_cast<std::streamsize>(header.size())) {
    throw TensorFormatError("truncated tensor header");
  }
  if (header[0] != 'M' || header[1] != 'T') throw TensorFormatError("bad tensor magic");
  RawTensor t;
  t.dtype = static_cast<DType>(header[2]);
  dtype_size(t.dtype);  // validates the code
  const int rank = header[3];
  if (rank < 1 || rank > kMaxTensorRank) throw TensorFormatError("bad tensor rank");
  t.dims.resize(rank);
  for (int i = 0; i < rank; ++i) std::memcpy(&t.dims[i], header.data() + 4 + 4 * i, 4);
  t.payload.resize(t.element_count() * dtype_size(t.dtype));
  in.read(reinterpret_cast<char*>(t.payload.data()), static_cast<std::streamsize>(t.payload.size()));
  if (in.gcount() != static_cast<std::streamsize>(t.payload.size())) {
    throw TensorFormatError("truncated tensor payload");
  }
  return t;
}

void write_tensor_file(const fs::path& path, DType dtype, std::span<const std::uint32_t> dims,
                       std::span<const std::byte> payload) {
  std::ostringstream buffer(std::ios::binary);
  write_tensor(buffer, dtype, dims, payload);
  const std::string bytes = buffer.str();
  write_file_atomic(path, bytes);
}

RawTensor read_tensor_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFormatError("cannot open tensor file " + path.string());
  RawTensor t = read_tensor(in);
  if (in.peek() != std::char_traits<char>::eof()) {
    throw TensorFormatError("trailing bytes in tensor file " + path.string());
  }
  return t;
}

void write_file_atomic(const fs::path& path, std::span<const char> bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_file_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const char>(text.data(), text.size()));
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace misdd
