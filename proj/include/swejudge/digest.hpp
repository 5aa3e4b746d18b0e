/// @file digest.hpp
/// SHA-256 hex digests (OpenSSL-backed), used for cache keys.
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <openssl/sha.h>

namespace swejudge {

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), md);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(2 * SHA256_DIGEST_LENGTH);
  for (unsigned char b : md) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 0x0f]);
  }
  return out;
}

}  // namespace swejudge
