#pragma once

// Self-describing binary container for named tensors plus a structured-text
// header. Layout (all integers little-endian):
//
//   8 bytes   magic "NVSTENS\0"
//   u32       format version
//   u64       header length, then header bytes (JSON text)
//   u64       tensor count
//   per tensor:
//     u32 name length, name bytes
//     u8  dtype tag (1 = float64)
//     u32 rank, rank x u64 dims
//     product(dims) x f64 payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nvs/errors.hpp"
#include "nvs/tensor.hpp"

namespace nvs {

inline constexpr char kTensorFileMagic[8] = {'N', 'V', 'S', 'T', 'E', 'N', 'S', '\0'};
inline constexpr std::uint32_t kTensorFileVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 1;

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

struct TensorFile {
  std::string header;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_doubles(double* dst, std::size_t n, const char* what) {
    need(n * sizeof(double), what);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw DataError(cat(source_, ": truncated while reading ", what, " at byte ", pos_));
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensor_file(const TensorFile& f) {
  std::string out(kTensorFileMagic, 8);
  detail::put<std::uint32_t>(out, kTensorFileVersion);
  detail::put<std::uint64_t>(out, f.header.size());
  out += f.header;
  detail::put<std::uint64_t>(out, f.tensors.size());
  for (const auto& t : f.tensors) {
    if (numel(t.shape) != t.data.size()) throw ShapeError("tensor file: shape/data mismatch for " + t.name);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint8_t>(out, kDtypeF64);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
  }
  return out;
}

inline TensorFile decode_tensor_file(const std::string& bytes, const std::string& source) {
  detail::Reader r(bytes, source);
  if (r.get_string(8, "magic") != std::string(kTensorFileMagic, 8)) throw DataError(source + ": bad magic bytes");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kTensorFileVersion)
    throw DataError(detail::cat(source, ": format version ", version, " but this build reads version ",
                                kTensorFileVersion));
  TensorFile f;
  f.header = r.get_string(r.get<std::uint64_t>("header length"), "header");
  const auto count = r.get<std::uint64_t>("tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.get_string(r.get<std::uint32_t>("name length"), "tensor name");
    const auto tag = r.get<std::uint8_t>("dtype");
    if (tag != kDtypeF64) throw DataError(detail::cat(source, ": tensor ", t.name, " has unknown dtype tag ", int(tag)));
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw DataError(detail::cat(source, ": tensor ", t.name, " has implausible rank ", rank));
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.get<std::uint64_t>("dims"));
    const std::size_t n = numel(t.shape);
    if (n > bytes.size()) throw DataError(detail::cat(source, ": truncated payload for ", t.name));
    t.data.resize(n);
    r.get_doubles(t.data.data(), n, "tensor payload");
    f.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw DataError(source + ": trailing bytes after last tensor");
  return f;
}

// Writes through a temporary file and rename so a crash never leaves a partial file.
inline void save_tensor_file(const std::filesystem::path& path, const TensorFile& f) {
  const std::string bytes = encode_tensor_file(f);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline TensorFile load_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_tensor_file(bytes, path.string());
}

}  // namespace nvs
