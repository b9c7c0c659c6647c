#pragma once

// Little-endian primitive I/O shared by the dataset and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "cdepth/errors.hpp"

namespace cdepth::binio {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void put_array(std::ostream& os, const T* data, std::size_t count) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(sizeof(T) * count));
}

/// Reads exactly `bytes` or throws Truncated.
inline void read_exact(std::istream& is, void* dst, std::size_t bytes, const std::string& what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(is.gcount()) != bytes) {
    throw FormatError(FormatError::Kind::kTruncated, "truncated " + what);
  }
}

template <typename T>
T get(std::istream& is, const std::string& what) {
  T value;
  read_exact(is, &value, sizeof(T), what);
  return value;
}

inline bool at_eof(std::istream& is) {
  return is.peek() == std::char_traits<char>::eof();
}

}  // namespace cdepth::binio
