#pragma once

#include <Eigen/Core>

#include <filesystem>

namespace cdepth {

/// Binary 16-bit PGM ("P5", maxval 65535, big-endian samples) storing
/// round(depth / meters_per_unit); the scale is written as a header comment.
void write_pgm16(const Eigen::ArrayXf& depth, int height, int width, double meters_per_unit,
                 const std::filesystem::path& path);

struct Pgm16 {
  int height = 0;
  int width = 0;
  double meters_per_unit = 0.0;  // 0 if the comment is absent
  Eigen::Array<std::uint16_t, Eigen::Dynamic, 1> values;
};
Pgm16 read_pgm16(const std::filesystem::path& path);

/// u32 height, u32 width, then float32 row-major, little-endian.
void write_raw32(const Eigen::ArrayXf& depth, int height, int width, const std::filesystem::path& path);
Eigen::ArrayXf read_raw32(const std::filesystem::path& path, int* height = nullptr, int* width = nullptr);

}  // namespace cdepth
