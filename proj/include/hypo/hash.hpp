#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace hypo {

// 64-bit FNV-1a. Stable across platforms; used for artifact fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string to_hex(std::uint64_t value);

// Hex FNV-1a digest of a file's bytes. Throws IoError if unreadable.
std::string hash_file(const std::string& path);

inline std::string hash_string(std::string_view bytes) { return to_hex(fnv1a64(bytes)); }

}  // namespace hypo
