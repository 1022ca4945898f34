#pragma once

// Little-endian float32 / uint32 file helpers shared by every on-disk format.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "exitrate/errors.hpp"

namespace exitrate::binio {

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[k])) << (8 * k);
  return v;
}

inline void append_f32(std::vector<char>& out, std::span<const double> values) {
  out.reserve(out.size() + 4 * values.size());
  for (double d : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(d)));
}

inline void append_u32(std::vector<char>& out, std::span<const std::uint32_t> values) {
  out.reserve(out.size() + 4 * values.size());
  for (auto v : values) put_u32(out, v);
}

inline std::vector<double> decode_f32(std::span<const char> bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes.data() + 4 * i)));
  }
  return out;
}

inline std::vector<std::uint32_t> decode_u32(std::span<const char> bytes) {
  std::vector<std::uint32_t> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_u32(bytes.data() + 4 * i);
  return out;
}

/// Round a double through float32, the on-disk precision.
inline double quantize(double d) { return static_cast<double>(static_cast<float>(d)); }

inline void write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span<const char>(text.data(), text.size()));
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

inline std::string read_text(const std::filesystem::path& path) {
  auto b = read_file(path);
  return std::string(b.begin(), b.end());
}

/// Reads a file that must hold exactly `count` 4-byte words.
inline std::vector<char> read_words(const std::filesystem::path& path, std::size_t count) {
  auto bytes = read_file(path);
  if (bytes.size() != 4 * count) {
    throw SizeMismatchError("'" + path.filename().string() + "': expected " +
                            std::to_string(4 * count) + " bytes, found " +
                            std::to_string(bytes.size()));
  }
  return bytes;
}

}  // namespace exitrate::binio
