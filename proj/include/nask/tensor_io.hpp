#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "nask/tensor.hpp"

namespace nask {

// On-disk tensor format: one JSON header line {"shape": [...], "name": "..."}
// terminated by '\n', followed by product(shape) little-endian 64-bit floats.

namespace detail {

inline void append_le64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline double read_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

inline std::string tensor_to_bytes(const Tensor& t, const std::string& name) {
  nlohmann::json header;
  header["shape"] = t.shape();
  header["name"] = name;
  std::string out = header.dump();
  out.push_back('\n');
  out.reserve(out.size() + t.data().size() * 8);
  for (double v : t.data()) detail::append_le64(out, v);
  return out;
}

inline Tensor tensor_from_bytes(const std::string& bytes, std::string* name = nullptr) {
  const size_t nl = bytes.find('\n');
  if (nl == std::string::npos) throw ParseError("missing tensor header line", 1);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad tensor header: ") + e.what(), 1);
  }
  std::vector<int> shape = header.at("shape").get<std::vector<int>>();
  if (name) *name = header.value("name", "");
  const std::int64_t n = detail::shape_numel(shape);
  if (bytes.size() - nl - 1 != static_cast<size_t>(n) * 8)
    throw ParseError("tensor payload length does not match shape", 1);
  std::vector<double> data(static_cast<size_t>(n));
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + nl + 1);
  for (std::int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = detail::read_le64(p + i * 8);
  return Tensor::from(std::move(data), std::move(shape));
}

inline void save_tensor(const std::string& path, const Tensor& t, const std::string& name) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path + " for writing");
  const std::string bytes = tensor_to_bytes(t, name);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("short write to " + path);
}

inline Tensor load_tensor(const std::string& path, std::string* name = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return tensor_from_bytes(bytes, name);
}

}  // namespace nask
