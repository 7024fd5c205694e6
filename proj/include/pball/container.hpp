#pragma once

// Tensor container file:
//   8 bytes   magic "PBALLWTS"
//   8 bytes   little-endian uint64 header length N
//   N bytes   UTF-8 JSON header; "tensors" lists {name, shape, offset, nbytes}
//   payload   little-endian float64 values; offsets are relative to payload start

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pball/error.hpp"
#include "pball/tensor.hpp"

namespace pball {

using json = nlohmann::json;

inline constexpr char kContainerMagic[8] = {'P', 'B', 'A', 'L', 'L', 'W', 'T', 'S'};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  json header = json::object();  // user metadata; "tensors" is reserved
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t.tensor;
    }
    throw IoError("container has no tensor named '" + name + "'");
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_container(const Container& c) {
  json header = c.header;
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& nt : c.tensors) {
    const std::uint64_t nbytes = nt.tensor.size() * 8;
    manifest.push_back({{"name", nt.name},
                        {"shape", nt.tensor.shape()},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = manifest;
  const std::string text = header.dump();
  std::string out(kContainerMagic, 8);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& nt : c.tensors) {
    for (double v : nt.tensor.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Container decode_container(const std::string& bytes, const std::string& what = "container") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16) throw IoError(what + ": truncated header");
  if (std::memcmp(bytes.data(), kContainerMagic, 8) != 0) throw IoError(what + ": bad magic");
  const std::uint64_t hlen = detail::get_u64(p + 8);
  if (hlen > bytes.size() - 16) throw IoError(what + ": truncated header");
  Container c;
  try {
    c.header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw IoError(what + ": malformed header JSON (" + e.what() + ")");
  }
  if (!c.header.is_object() || !c.header.contains("tensors") || !c.header["tensors"].is_array()) {
    throw IoError(what + ": header lacks a tensor manifest");
  }
  const std::size_t payload = 16 + hlen;
  const std::size_t available = bytes.size() - payload;
  for (const auto& entry : c.header["tensors"]) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(shape) * 8) {
      throw IoError(what + ": tensor '" + entry.at("name").get<std::string>() +
                    "' byte count does not match its shape");
    }
    if (off > available || nbytes > available - off) {
      throw IoError(what + ": truncated payload (tensor '" + entry.at("name").get<std::string>() + "')");
    }
    std::vector<double> data(shape_numel(shape));
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = std::bit_cast<double>(detail::get_u64(p + payload + off + 8 * i));
    }
    c.tensors.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
  }
  c.header.erase("tensors");
  return c;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline void save_container(const std::filesystem::path& path, const Container& c) {
  write_file(path, encode_container(c));
}

inline Container load_container(const std::filesystem::path& path) {
  return decode_container(read_file(path), path.string());
}

}  // namespace pball
