#include "cdepth/depth_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "binio.hpp"
#include "cdepth/errors.hpp"

namespace cdepth {

void write_pgm16(const Eigen::ArrayXf& depth, int height, int width, double meters_per_unit,
                 const std::filesystem::path& path) {
  if (!(meters_per_unit > 0.0)) throw ConfigError("meters_per_unit must be positive");
  if (height <= 0 || width <= 0 || depth.size() != static_cast<Eigen::Index>(height) * width) {
    throw ContractError("write_pgm16: map size does not match dimensions");
  }
  std::vector<std::uint16_t> units(static_cast<std::size_t>(depth.size()));
  for (Eigen::Index i = 0; i < depth.size(); ++i) {
    const double v = std::round(static_cast<double>(depth[i]) / meters_per_unit);
    if (!(v >= 0.0 && v <= 65535.0)) {
      std::ostringstream msg;
      msg << "depth " << depth[i] << " at pixel " << i << " is outside the 16-bit range at " << meters_per_unit
          << " m/unit";
      throw ContractError(msg.str());
    }
    units[static_cast<std::size_t>(i)] = static_cast<std::uint16_t>(v);
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "' for writing");
  std::ostringstream head;
  head.precision(17);
  head << "P5\n# meters_per_unit " << meters_per_unit << "\n" << width << " " << height << "\n65535\n";
  os << head.str();
  for (std::uint16_t u : units) {
    os.put(static_cast<char>(u >> 8));
    os.put(static_cast<char>(u & 0xFF));
  }
  if (!os) throw FormatError(FormatError::Kind::kIo, "write to '" + path.string() + "' failed");
}

Pgm16 read_pgm16(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  Pgm16 out;
  std::string magic;
  is >> magic;
  if (magic != "P5") throw FormatError(FormatError::Kind::kBadMagic, "not a binary PGM");
  int fields[3];
  for (int k = 0; k < 3;) {
    is >> std::ws;
    if (is.peek() == '#') {
      std::string line;
      std::getline(is, line);
      std::istringstream ls(line);
      std::string hash, key;
      double value = 0.0;
      if (ls >> hash >> key >> value && key == "meters_per_unit") out.meters_per_unit = value;
      continue;
    }
    if (!(is >> fields[k])) throw FormatError(FormatError::Kind::kCorrupt, "bad PGM header");
    ++k;
  }
  is.get();
  out.width = fields[0];
  out.height = fields[1];
  if (fields[2] != 65535) throw FormatError(FormatError::Kind::kCorrupt, "expected 16-bit PGM");
  out.values.resize(static_cast<Eigen::Index>(out.width) * out.height);
  for (Eigen::Index i = 0; i < out.values.size(); ++i) {
    unsigned char hi = 0, lo = 0;
    binio::read_exact(is, &hi, 1, "PGM data");
    binio::read_exact(is, &lo, 1, "PGM data");
    out.values[i] = static_cast<std::uint16_t>((hi << 8) | lo);
  }
  return out;
}

void write_raw32(const Eigen::ArrayXf& depth, int height, int width, const std::filesystem::path& path) {
  if (height <= 0 || width <= 0 || depth.size() != static_cast<Eigen::Index>(height) * width) {
    throw ContractError("write_raw32: map size does not match dimensions");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "' for writing");
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(height));
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(width));
  binio::put_array(os, depth.data(), static_cast<std::size_t>(depth.size()));
  if (!os) throw FormatError(FormatError::Kind::kIo, "write to '" + path.string() + "' failed");
}

Eigen::ArrayXf read_raw32(const std::filesystem::path& path, int* height, int* width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  const auto h = binio::get<std::uint32_t>(is, "raw32 header");
  const auto w = binio::get<std::uint32_t>(is, "raw32 header");
  Eigen::ArrayXf out(static_cast<Eigen::Index>(h) * w);
  binio::read_exact(is, out.data(), sizeof(float) * static_cast<std::size_t>(out.size()), "raw32 data");
  if (height) *height = static_cast<int>(h);
  if (width) *width = static_cast<int>(w);
  return out;
}

}  // namespace cdepth
