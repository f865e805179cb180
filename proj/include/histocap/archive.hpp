#pragma once

// Named tensor archive, bit-exact layout:
//
//   "HCT1" | u64 LE header length | UTF-8 JSON header | payload
//
// The header maps each tensor name to {"dtype":"f32","shape":[...],
// "offset":N}, where offset is the byte position inside the payload.
// Tensors are laid out in name order, so offsets ascend without gaps and
// the payload is exactly the sum of the tensor sizes.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "histocap/error.hpp"
#include "histocap/numerics/tensor.hpp"

namespace histocap {

static_assert(std::endian::native == std::endian::little,
              "tensor archives are written in host order; big-endian hosts are unsupported");

using TensorMap = std::map<std::string, Tensorf>;

namespace archive {

inline constexpr char kMagic[4] = {'H', 'C', 'T', '1'};

inline std::string encode(const TensorMap& tensors) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}};
    offset += t.numel() * sizeof(float);
  }
  const std::string head = header.dump();
  std::string out;
  out.reserve(12 + head.size() + offset);
  out.append(kMagic, 4);
  const std::uint64_t len = head.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += head;
  for (const auto& [name, t] : tensors) {
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
  }
  return out;
}

// Parses a whole archive image. Nothing is returned unless every tensor
// validates, so a failed load never yields a partial map.
inline TensorMap decode(const std::string& bytes, const std::string& origin = "<memory>") {
  auto fail = [&](const std::string& why) { return DataError(origin + ": " + why); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    if (bytes.size() >= 4 && std::memcmp(bytes.data(), "HCT", 3) == 0) {
      throw fail("unsupported archive version '" + bytes.substr(0, 4) + "'");
    }
    throw fail("bad magic, not an HCT1 tensor archive");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, sizeof(len));
  if (len > bytes.size() - 12) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) throw fail("header is not a JSON object");
  const std::size_t payload_start = 12 + static_cast<std::size_t>(len);
  const std::size_t payload_size = bytes.size() - payload_start;

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (const auto& [name, info] : header.items()) {
    try {
      if (info.at("dtype").get<std::string>() != "f32") {
        throw fail("tensor '" + name + "' has unsupported dtype");
      }
      entries.push_back({name, info.at("shape").get<Shape>(), info.at("offset").get<std::uint64_t>()});
    } catch (const nlohmann::json::exception&) {
      throw fail("tensor '" + name + "' has an invalid header entry");
    }
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
  std::uint64_t expected = 0;
  TensorMap out;
  for (const auto& e : entries) {
    if (e.offset != expected) throw fail("payload offsets are not contiguous at '" + e.name + "'");
    if (e.shape.empty()) throw fail("tensor '" + e.name + "' has an empty shape");
    const std::uint64_t bytes_needed = shape_numel(e.shape) * sizeof(float);
    if (e.offset + bytes_needed > payload_size) throw fail("truncated payload for '" + e.name + "'");
    std::vector<float> values(shape_numel(e.shape));
    std::memcpy(values.data(), bytes.data() + payload_start + e.offset, bytes_needed);
    out.emplace(e.name, Tensorf(e.shape, std::move(values)));
    expected += bytes_needed;
  }
  if (expected != payload_size) throw fail("trailing bytes after payload");
  return out;
}

inline void save(const std::filesystem::path& path, const TensorMap& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = encode(tensors);
  // Write-then-rename so readers never observe a half-written archive.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline TensorMap load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor archive " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode(buf.str(), path.string());
}

// Fetches `name` and checks its extents, reporting both shapes on mismatch.
inline const Tensorf& require(const TensorMap& tensors, const std::string& name,
                              const Shape& expected) {
  const auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("missing tensor '" + name + "'");
  if (it->second.shape() != expected) {
    throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                     ", expected " + shape_str(expected));
  }
  return it->second;
}

}  // namespace archive

// Copies a model-precision tensor into an archive map (f32).
template <typename T>
void put_tensor(TensorMap& out, const std::string& name, const Tensor<T>& t) {
  out.insert_or_assign(name, t.template cast<float>());
}

// Loads `name` from an archive map into a fresh model-precision leaf.
template <typename T>
Tensor<T> take_tensor(const TensorMap& in, const std::string& name, const Shape& shape) {
  return archive::require(in, name, shape).template cast<T>();
}

}  // namespace histocap
