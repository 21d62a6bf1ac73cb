/**
 * Copyright      2026  The llmfuse Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// ParamStore checkpoint files.
//
//   "GFAP"  u32 version
//   repeated until EOF:
//     u32 path_length, path bytes, u32 rank, rank x u32 dims,
//     product(dims) x f32 values
//
// All integers and floats are little-endian.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "llmfuse/errors.hpp"
#include "llmfuse/numcore/param_store.hpp"

namespace llmfuse {

inline constexpr char kCheckpointMagic[4] = {'G', 'F', 'A', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

// Returns false on clean EOF before the first byte; throws on a short read.
inline bool get_u32(std::istream& is, std::uint32_t& v, const std::string& where, bool eof_ok = false) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() == 0 && eof_ok) return false;
  if (is.gcount() != 4) throw ParseError(where, 0, "truncated file");
  v = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  return true;
}

inline float get_f32(std::istream& is, const std::string& where) {
  std::uint32_t v;
  get_u32(is, v, where);
  return std::bit_cast<float>(v);
}

inline void expect_magic(std::istream& is, const char (&magic)[4], const std::string& where) {
  char m[4];
  is.read(m, 4);
  if (is.gcount() != 4 || std::memcmp(m, magic, 4) != 0) {
    throw ParseError(where, 0, std::string("bad magic, expected ") + std::string(magic, 4));
  }
}

}  // namespace detail

template <class T>
void write_checkpoint(std::ostream& os, const ParamStore<T>& params) {
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  for (const auto& [path, t] : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(path.size()));
    os.write(path.data(), static_cast<std::streamsize>(path.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (T v : t.data()) detail::put_f32(os, static_cast<float>(v));
  }
}

template <class T>
void save_checkpoint(const std::filesystem::path& file, const ParamStore<T>& params) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + file.string());
  write_checkpoint(os, params);
  if (!os) throw DataError("write failed: " + file.string());
}

template <class T = float>
ParamStore<T> read_checkpoint(std::istream& is, const std::string& where = "<checkpoint>") {
  detail::expect_magic(is, kCheckpointMagic, where);
  std::uint32_t version;
  detail::get_u32(is, version, where);
  if (version != kCheckpointVersion) {
    throw ParseError(where, 0, "unsupported checkpoint version " + std::to_string(version));
  }
  ParamStore<T> params;
  std::uint32_t path_len;
  while (detail::get_u32(is, path_len, where, /*eof_ok=*/true)) {
    if (path_len == 0 || path_len > 4096) throw ParseError(where, 0, "bad parameter path length");
    std::string path(path_len, '\0');
    is.read(path.data(), path_len);
    if (is.gcount() != static_cast<std::streamsize>(path_len)) throw ParseError(where, 0, "truncated file");
    std::uint32_t rank;
    detail::get_u32(is, rank, where);
    if (rank == 0 || rank > 8) throw ParseError(where, 0, "bad rank for " + path);
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v;
      detail::get_u32(is, v, where);
      if (v == 0) throw ParseError(where, 0, "zero dimension for " + path);
      d = v;
    }
    std::vector<T> data(shape_size(shape));
    for (auto& v : data) v = static_cast<T>(detail::get_f32(is, where));
    if (params.contains(path)) throw ParseError(where, 0, "duplicate parameter " + path);
    params.add(path, Tensor<T>(std::move(shape), std::move(data)));
  }
  return params;
}

template <class T = float>
ParamStore<T> load_checkpoint(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + file.string());
  return read_checkpoint<T>(is, file.string());
}

}  // namespace llmfuse
