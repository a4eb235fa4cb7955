#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "octyolo/tensor.hpp"

namespace octyolo {

// Tensors are stored as two files sharing a stem: <stem>.bin holds the raw
// little-endian scalars in NCHW order and <stem>.json holds
// {"shape": [n, c, h, w], "dtype": "f32"|"f64", "byte_order": "little"}.

namespace detail {
template <class T>
void to_little_endian(T* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i) {
      auto* bytes = reinterpret_cast<unsigned char*>(data + i);
      std::reverse(bytes, bytes + sizeof(T));
    }
  } else {
    (void)data;
    (void)count;
  }
}
}  // namespace detail

template <std::floating_point T>
nlohmann::json tensor_sidecar(const Tensor<T>& t) {
  const Shape& s = t.shape();
  return {{"shape", {s.n, s.c, s.h, s.w}}, {"dtype", to_string(dtype_of<T>())}, {"byte_order", "little"}};
}

template <std::floating_point T>
void write_tensor(const std::filesystem::path& stem, const Tensor<T>& t) {
  std::vector<T> buf(t.vec());
  detail::to_little_endian(buf.data(), buf.size());
  std::ofstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw Error("write_tensor: cannot open " + stem.string() + ".bin");
  bin.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
  std::ofstream meta(stem.string() + ".json");
  if (!meta) throw Error("write_tensor: cannot open " + stem.string() + ".json");
  meta << tensor_sidecar(t).dump(2) << "\n";
}

/// Reads a tensor written by write_tensor. The stored dtype must match T.
template <std::floating_point T>
Tensor<T> read_tensor(const std::filesystem::path& stem) {
  std::ifstream meta(stem.string() + ".json");
  if (!meta) throw Error("read_tensor: cannot open " + stem.string() + ".json");
  const auto j = nlohmann::json::parse(meta);
  if (j.at("byte_order").get<std::string>() != "little") throw Error("read_tensor: unsupported byte order");
  if (j.at("dtype").get<std::string>() != to_string(dtype_of<T>())) {
    throw Error("read_tensor: stored dtype " + j.at("dtype").get<std::string>() + " does not match requested " +
                to_string(dtype_of<T>()));
  }
  const auto dims = j.at("shape").get<std::vector<int>>();
  if (dims.size() != 4) throw ShapeError("read_tensor: shape must have 4 dims");
  const Shape s{dims[0], dims[1], dims[2], dims[3]};
  std::vector<T> buf(s.numel());
  std::ifstream bin(stem.string() + ".bin", std::ios::binary);
  if (!bin) throw Error("read_tensor: cannot open " + stem.string() + ".bin");
  bin.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(T)));
  if (bin.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(T))) {
    throw Error("read_tensor: " + stem.string() + ".bin is shorter than shape " + s.str());
  }
  detail::to_little_endian(buf.data(), buf.size());
  return Tensor<T>(s, std::move(buf));
}

}  // namespace octyolo
