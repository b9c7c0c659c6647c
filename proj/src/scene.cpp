#include "cdepth/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "binio.hpp"
#include "cdepth/rng.hpp"

namespace cdepth {

std::vector<ObjectClass> default_catalog() {
  return {
      {"chair", 1.0, 0.5, 0.20, 1.6, 2.8},
      {"table", 0.75, 1.5, 0.35, 1.6, 2.8},
      {"bed", 0.6, 2.0, 0.50, 1.6, 2.8},
      {"door", 2.0, 0.9, 0.65, 2.0, 2.8},
      {"lamp", 1.5, 0.3, 0.80, 1.6, 2.8},
      {"shelf", 1.8, 0.8, 0.95, 2.0, 2.8},
  };
}

void GeneratorConfig::validate(const std::vector<ObjectClass>& catalog) const {
  if (catalog.empty()) throw ConfigError("object catalog is empty");
  if (height <= 0 || width <= 0 || height > 0xFFFF || width > 0xFFFF) throw ConfigError("image size out of range");
  if (!(focal > 0.0)) throw ConfigError("focal length must be positive");
  if (!(wall_min > 0.0 && wall_max >= wall_min)) throw ConfigError("wall depth range invalid");
  if (min_objects < 0 || max_objects < min_objects) throw ConfigError("object count range invalid");
  if (static_cast<std::size_t>(max_objects) > catalog.size()) {
    throw ConfigError("max_objects exceeds catalog size (classes are drawn without replacement)");
  }
  std::vector<double> albedos;
  for (const auto& c : catalog) {
    if (!(c.height > 0.0 && c.width > 0.0)) throw ConfigError("class '" + c.name + "' has non-positive size");
    if (!(c.albedo > 0.0 && c.albedo <= 1.0)) throw ConfigError("class '" + c.name + "' albedo outside (0, 1]");
    if (!(c.depth_min > 0.0 && c.depth_max >= c.depth_min)) throw ConfigError("class '" + c.name + "' depth range invalid");
    if (c.depth_max >= wall_min) throw ConfigError("class '" + c.name + "' may be placed behind the wall");
    if (std::find(albedos.begin(), albedos.end(), c.albedo) != albedos.end() || c.albedo == wall_albedo) {
      throw ConfigError("class '" + c.name + "' albedo is not unique");
    }
    albedos.push_back(c.albedo);
  }
}

bool SceneSpec::operator==(const SceneSpec& o) const {
  if (scale != o.scale || wall_depth != o.wall_depth || seed != o.seed || objects.size() != o.objects.size()) return false;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const auto& a = objects[i];
    const auto& b = o.objects[i];
    if (a.class_id != b.class_id || a.offset_x != b.offset_x || a.offset_y != b.offset_y || a.depth != b.depth) return false;
  }
  return true;
}

SceneSpec sample_scene(std::uint64_t seed, const std::vector<ObjectClass>& catalog, const GeneratorConfig& cfg) {
  cfg.validate(catalog);
  SceneSpec scene;
  scene.seed = seed;
  // Scale and layout come from independent streams.
  auto scale_rng = make_rng(seed, 1);
  scene.scale = (scale_rng() >> 63) == 0 ? 1 : 2;

  auto rng = make_rng(seed, 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  scene.wall_depth = cfg.wall_min + (cfg.wall_max - cfg.wall_min) * unit(rng);
  const int count = std::uniform_int_distribution<int>(cfg.min_objects, cfg.max_objects)(rng);

  std::vector<int> ids(catalog.size());
  std::iota(ids.begin(), ids.end(), 0);
  for (int k = 0; k < count; ++k) {
    const int pick = std::uniform_int_distribution<int>(k, static_cast<int>(ids.size()) - 1)(rng);
    std::swap(ids[static_cast<std::size_t>(k)], ids[static_cast<std::size_t>(pick)]);
    const ObjectClass& cls = catalog[static_cast<std::size_t>(ids[static_cast<std::size_t>(k)])];
    PlacedObject obj;
    obj.class_id = ids[static_cast<std::size_t>(k)];
    obj.depth = cls.depth_min + (cls.depth_max - cls.depth_min) * unit(rng);
    // Image-plane centre drawn in the middle half of the frame, stored in meters.
    const double u = (0.25 + 0.5 * unit(rng)) * cfg.width;
    const double v = (0.25 + 0.5 * unit(rng)) * cfg.height;
    obj.offset_x = (u - 0.5 * cfg.width) * obj.depth / cfg.focal;
    obj.offset_y = (v - 0.5 * cfg.height) * obj.depth / cfg.focal;
    scene.objects.push_back(obj);
  }
  return scene;
}

int projected_half_extent(double size, double depth, double focal) {
  if (!(depth > 0.0)) throw ContractError("projected_half_extent: depth must be positive");
  return static_cast<int>(std::lround(size * focal / (2.0 * depth)));
}

Rendering render(const SceneSpec& scene, const std::vector<ObjectClass>& catalog, const GeneratorConfig& cfg) {
  if (scene.scale != 1 && scene.scale != 2) throw ContractError("render: scale must be 1 or 2");
  if (!(scene.wall_depth > 0.0)) throw ContractError("render: wall depth must be positive");
  const double k = scene.scale;
  const int h = cfg.height, w = cfg.width;
  Rendering out;
  out.image = Eigen::ArrayXf::Constant(h * w, static_cast<float>(cfg.wall_albedo));
  out.depth = Eigen::ArrayXf::Constant(h * w, static_cast<float>(scene.wall_depth * k));

  // Painter's order: far to near, ties in listing order.
  std::vector<std::size_t> order(scene.objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scene.objects[a].depth > scene.objects[b].depth; });
  for (std::size_t idx : order) {
    const PlacedObject& obj = scene.objects[idx];
    if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= catalog.size()) {
      throw ContractError("render: unknown class id " + std::to_string(obj.class_id));
    }
    const ObjectClass& cls = catalog[static_cast<std::size_t>(obj.class_id)];
    if (!(obj.depth > 0.0)) throw ContractError("render: object depth must be positive");
    // Post-scale geometry; kappa cancels exactly in every ratio below.
    const double z = obj.depth * k;
    const int half_h = projected_half_extent(cls.height * k, z, cfg.focal);
    const int half_w = projected_half_extent(cls.width * k, z, cfg.focal);
    const long cu = std::lround(0.5 * w + obj.offset_x * k * cfg.focal / z);
    const long cv = std::lround(0.5 * h + obj.offset_y * k * cfg.focal / z);
    const long r0 = std::max<long>(0, cv - half_h), r1 = std::min<long>(h, cv + half_h);
    const long c0 = std::max<long>(0, cu - half_w), c1 = std::min<long>(w, cu + half_w);
    for (long r = r0; r < r1; ++r) {
      for (long c = c0; c < c1; ++c) {
        out.image[r * w + c] = static_cast<float>(cls.albedo);
        out.depth[r * w + c] = static_cast<float>(z);
      }
    }
  }
  return out;
}

Vocabulary caption_vocabulary(const std::vector<ObjectClass>& catalog) {
  Vocabulary vocab;
  for (const char* word : {"a", "small", "large", "room", "with", "and"}) vocab.add(word);
  for (const auto& c : catalog) vocab.add(c.name);
  return vocab;
}

std::vector<TokenId> caption(const SceneSpec& scene, const std::vector<ObjectClass>& catalog,
                             const Vocabulary& vocab) {
  const auto id = [&](const std::string& word) {
    if (!vocab.contains(word)) throw VocabularyError("caption word '" + word + "' missing from vocabulary");
    return vocab.lookup(word);
  };
  std::vector<int> classes;
  for (const auto& obj : scene.objects) {
    if (obj.class_id < 0 || static_cast<std::size_t>(obj.class_id) >= catalog.size()) {
      throw VocabularyError("caption: unknown class id " + std::to_string(obj.class_id));
    }
    classes.push_back(obj.class_id);
  }
  std::sort(classes.begin(), classes.end());
  std::vector<TokenId> ids{id("a"), id(scene.scale == 1 ? "small" : "large"), id("room")};
  for (std::size_t i = 0; i < classes.size(); ++i) {
    ids.push_back(id(i == 0 ? "with" : "and"));
    ids.push_back(id("a"));
    ids.push_back(id(catalog[static_cast<std::size_t>(classes[i])].name));
  }
  return ids;
}

bool Sample::operator==(const Sample& o) const {
  const auto bits_equal = [](const Eigen::ArrayXf& a, const Eigen::ArrayXf& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
  };
  return caption == o.caption && bits_equal(image, o.image) && bits_equal(depth, o.depth) &&
         mask.size() == o.mask.size() && (mask == o.mask).all();
}

Dataset generate_dataset(std::uint64_t seed, int count, const std::vector<ObjectClass>& catalog,
                         const GeneratorConfig& cfg) {
  if (count < 0) throw ConfigError("sample count must be non-negative");
  cfg.validate(catalog);
  Dataset data;
  data.header.channels = 1;
  data.header.height = static_cast<std::uint16_t>(cfg.height);
  data.header.width = static_cast<std::uint16_t>(cfg.width);
  data.header.vocab = caption_vocabulary(catalog);
  data.samples.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const SceneSpec scene = sample_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), catalog, cfg);
    Rendering r = render(scene, catalog, cfg);
    Sample s;
    s.image = std::move(r.image);
    s.depth = std::move(r.depth);
    s.caption = caption(scene, catalog, data.header.vocab);
    s.mask = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>::Ones(s.depth.size());
    data.samples.push_back(std::move(s));
  }
  return data;
}

void write_dataset(const Dataset& data, const std::filesystem::path& path) {
  const auto& hd = data.header;
  const Index pixels = data.pixels();
  const Index image_size = pixels * hd.channels;
  if (data.samples.size() > 0xFFFFFFFFu) throw ContractError("write_dataset: too many samples");
  for (const auto& s : data.samples) {
    if (s.image.size() != image_size || s.depth.size() != pixels || s.mask.size() != pixels) {
      throw ContractError("write_dataset: sample dimensions disagree with header");
    }
    for (TokenId t : s.caption) {
      if (t >= hd.vocab.size()) throw ContractError("write_dataset: caption token outside vocabulary");
    }
    if (s.caption.size() > 0xFFFF) throw ContractError("write_dataset: caption too long");
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "' for writing");
  os.write(kDatasetMagic, 4);
  binio::put<std::uint16_t>(os, kDatasetVersion);
  binio::put<std::uint32_t>(os, static_cast<std::uint32_t>(data.samples.size()));
  binio::put<std::uint16_t>(os, hd.channels);
  binio::put<std::uint16_t>(os, hd.height);
  binio::put<std::uint16_t>(os, hd.width);
  binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(hd.vocab.size()));
  for (const auto& tok : hd.vocab.tokens()) {
    binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(tok.size()));
    os.write(tok.data(), static_cast<std::streamsize>(tok.size()));
  }
  for (const auto& s : data.samples) {
    binio::put<std::uint16_t>(os, static_cast<std::uint16_t>(s.caption.size()));
    binio::put_array(os, s.caption.data(), s.caption.size());
    binio::put_array(os, s.image.data(), static_cast<std::size_t>(s.image.size()));
    binio::put_array(os, s.depth.data(), static_cast<std::size_t>(s.depth.size()));
    binio::put_array(os, s.mask.data(), static_cast<std::size_t>(s.mask.size()));
  }
  if (!os) throw FormatError(FormatError::Kind::kIo, "write to '" + path.string() + "' failed");
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::kIo, "cannot open '" + path.string() + "'");
  char magic[4];
  binio::read_exact(is, magic, 4, "dataset header");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError(FormatError::Kind::kBadMagic, "not a dataset file (bad magic)");
  const auto version = binio::get<std::uint16_t>(is, "dataset header");
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::kBadVersion, "unsupported dataset version " + std::to_string(version));
  }
  Dataset data;
  const auto count = binio::get<std::uint32_t>(is, "dataset header");
  data.header.channels = binio::get<std::uint16_t>(is, "dataset header");
  data.header.height = binio::get<std::uint16_t>(is, "dataset header");
  data.header.width = binio::get<std::uint16_t>(is, "dataset header");
  const auto vocab_size = binio::get<std::uint16_t>(is, "dataset header");
  std::vector<std::string> tokens;
  for (std::uint16_t i = 0; i < vocab_size; ++i) {
    const auto len = binio::get<std::uint16_t>(is, "vocabulary");
    std::string tok(len, '\0');
    binio::read_exact(is, tok.data(), len, "vocabulary");
    tokens.push_back(std::move(tok));
  }
  try {
    data.header.vocab = Vocabulary(std::move(tokens));
  } catch (const VocabularyError& e) {
    throw FormatError(FormatError::Kind::kCorrupt, std::string("bad vocabulary: ") + e.what());
  }
  if (data.header.channels == 0 || data.header.height == 0 || data.header.width == 0) {
    throw FormatError(FormatError::Kind::kCorrupt, "zero image dimension in header");
  }
  const Index pixels = data.pixels();
  const Index image_size = pixels * data.header.channels;
  data.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (binio::at_eof(is)) {
      throw FormatError(FormatError::Kind::kCountMismatch, "header declares " + std::to_string(count) +
                                                               " records, file holds " + std::to_string(i));
    }
    const std::string what = "record " + std::to_string(i);
    Sample s;
    s.caption.resize(binio::get<std::uint16_t>(is, what));
    binio::read_exact(is, s.caption.data(), s.caption.size() * sizeof(TokenId), what);
    for (TokenId t : s.caption) {
      if (t >= data.header.vocab.size()) throw FormatError(FormatError::Kind::kCorrupt, what + ": token id outside vocabulary");
    }
    s.image.resize(image_size);
    binio::read_exact(is, s.image.data(), static_cast<std::size_t>(image_size) * sizeof(float), what);
    s.depth.resize(pixels);
    binio::read_exact(is, s.depth.data(), static_cast<std::size_t>(pixels) * sizeof(float), what);
    s.mask.resize(pixels);
    binio::read_exact(is, s.mask.data(), static_cast<std::size_t>(pixels), what);
    data.samples.push_back(std::move(s));
  }
  if (!binio::at_eof(is)) {
    throw FormatError(FormatError::Kind::kCountMismatch,
                      "trailing data after the " + std::to_string(count) + " declared records");
  }
  return data;
}

}  // namespace cdepth
