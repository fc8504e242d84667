#pragma once

// Named-tensor bundle: "MKGCTNS1", u64 count, then per tensor
// u64 name length, name bytes, u64 rows, u64 cols, row-major float64.
// Integers and floats are written in host (little-endian) order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mkgc/error.hpp"
#include "mkgc/numerics/matrix.hpp"

namespace mkgc {

static_assert(std::endian::native == std::endian::little, "binary formats assume little-endian hosts");

namespace detail {

inline void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) fail(ErrorKind::kParse, what + ": truncated header");
  return v;
}

inline void put_doubles(std::ostream& out, std::span<const double> values) {
  out.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
}

inline Matrix get_matrix(std::istream& in, std::uint64_t rows, std::uint64_t cols, const std::string& what) {
  require(rows < (1ULL << 32) && cols < (1ULL << 32), ErrorKind::kParse, what + ": implausible shape");
  std::vector<double> data(rows * cols);
  if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)))) {
    fail(ErrorKind::kParse, what + ": truncated payload");
  }
  try {
    return Matrix(rows, cols, std::move(data));
  } catch (const Error& e) {
    fail(ErrorKind::kParse, what + ": " + e.what());
  }
}

}  // namespace detail

using TensorBundle = std::vector<std::pair<std::string, Matrix>>;

inline void write_tensors(const std::filesystem::path& path, const TensorBundle& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out.write("MKGCTNS1", 8);
  detail::put_u64(out, tensors.size());
  for (const auto& [name, m] : tensors) {
    detail::put_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u64(out, m.rows());
    detail::put_u64(out, m.cols());
    detail::put_doubles(out, m.values());
  }
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed: " + path.string());
}

inline TensorBundle read_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  const std::string what = path.string();
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, "MKGCTNS1", 8) != 0) {
    fail(ErrorKind::kParse, what + ": not a tensor bundle");
  }
  const std::uint64_t n = detail::get_u64(in, what);
  require(n < (1ULL << 20), ErrorKind::kParse, what + ": implausible tensor count");
  TensorBundle out;
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t len = detail::get_u64(in, what);
    require(len < 4096, ErrorKind::kParse, what + ": implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(len))) fail(ErrorKind::kParse, what + ": truncated name");
    const std::uint64_t rows = detail::get_u64(in, what);
    const std::uint64_t cols = detail::get_u64(in, what);
    Matrix m = detail::get_matrix(in, rows, cols, what + " [" + name + "]");
    out.emplace_back(std::move(name), std::move(m));
  }
  return out;
}

inline const Matrix& find_tensor(const TensorBundle& bundle, const std::string& name) {
  for (const auto& [n, m] : bundle) {
    if (n == name) return m;
  }
  fail(ErrorKind::kNotFound, "tensor '" + name + "' missing from bundle");
}

}  // namespace mkgc
