#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>

#include "cnc/core/error.hpp"
#include "cnc/core/rng.hpp"

namespace cnc {

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string sha1_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha1(), nullptr) != 1)
    fail(ErrorKind::io, "sha1 digest failed");
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    out += buf;
  }
  return out;
}

/// Git blob object id: sha1("blob <size>\0" + content).
inline std::string git_blob_hash(std::string_view content) {
  std::string obj = "blob " + std::to_string(content.size());
  obj.push_back('\0');
  obj.append(content);
  return sha1_hex(obj);
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot read " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline std::string git_blob_hash_file(const std::filesystem::path& path) {
  return git_blob_hash(read_file_bytes(path));
}

/// Content hash of a float buffer (bit pattern, not value).
template <typename T>
std::uint64_t bits_hash(const T* data, std::size_t n, std::uint64_t seed = 14695981039346656037ULL) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(data), n * sizeof(T)), seed);
}

}  // namespace cnc
