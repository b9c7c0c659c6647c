#pragma once

// Procedural scale-ambiguous scenes: fronto-parallel rectangles in front of a
// wall, seen by a pinhole camera. A scale factor kappa in {1, 2} multiplies
// every length, so images are identical across kappa while depth doubles; the
// caption's "small"/"large" word is the only scale cue.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdepth/text_prior.hpp"

namespace cdepth {

struct ObjectClass {
  std::string name;
  double height;  // meters
  double width;   // meters
  double albedo;  // gray level in (0, 1]
  double depth_min;
  double depth_max;
};

/// chair, table, bed, door, lamp, shelf.
std::vector<ObjectClass> default_catalog();

struct GeneratorConfig {
  int height = 32;
  int width = 32;
  double focal = 64.0;  // pixels
  double wall_min = 3.0;
  double wall_max = 6.0;
  double wall_albedo = 0.05;
  int min_objects = 1;
  int max_objects = 3;

  void validate(const std::vector<ObjectClass>& catalog) const;
};

struct PlacedObject {
  int class_id;
  double offset_x;  // meters, pre-scale, at the object's depth; +x right
  double offset_y;  // meters, pre-scale; +y down
  double depth;     // meters, pre-scale
};

struct SceneSpec {
  int scale = 1;  // kappa
  double wall_depth = 0.0;  // pre-scale
  std::vector<PlacedObject> objects;
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec& o) const;
};

SceneSpec sample_scene(std::uint64_t seed, const std::vector<ObjectClass>& catalog, const GeneratorConfig& cfg);

/// Half extent in pixels of a length `size` at distance `depth`: round(size*f/(2*depth)).
int projected_half_extent(double size, double depth, double focal);

struct Rendering {
  Eigen::ArrayXf image;  // H*W row-major, single channel
  Eigen::ArrayXf depth;  // H*W meters
};

Rendering render(const SceneSpec& scene, const std::vector<ObjectClass>& catalog, const GeneratorConfig& cfg);

/// "<pad>", "<unk>", template words, then class names in catalog order.
Vocabulary caption_vocabulary(const std::vector<ObjectClass>& catalog);

/// "a small|large room with a <obj> [and a <obj>]...", objects in catalog order.
std::vector<TokenId> caption(const SceneSpec& scene, const std::vector<ObjectClass>& catalog,
                             const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Dataset

struct Sample {
  Eigen::ArrayXf image;  // C*H*W in [0, 1]
  std::vector<TokenId> caption;
  Eigen::ArrayXf depth;  // H*W meters
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> mask;  // H*W, 1 = valid

  bool operator==(const Sample& o) const;
};

struct DatasetHeader {
  std::uint16_t channels = 1;
  std::uint16_t height = 32;
  std::uint16_t width = 32;
  Vocabulary vocab;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Sample> samples;

  Index pixels() const { return Index{header.height} * header.width; }
};

inline constexpr char kDatasetMagic[4] = {'W', 'D', 'P', 'H'};
inline constexpr std::uint16_t kDatasetVersion = 1;

/// Sample i is rendered from seed mix_seed(seed, i).
Dataset generate_dataset(std::uint64_t seed, int count, const std::vector<ObjectClass>& catalog,
                         const GeneratorConfig& cfg);

void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace cdepth
