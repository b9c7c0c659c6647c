#pragma once

// Model dimensions and the three trainable parameter groups:
//   text head (caption -> mu, sigma), conditional sampler (image -> eps grid),
//   depth decoder (latent grid -> depth).

#include <array>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cdepth/graph.hpp"
#include "cdepth/rng.hpp"

namespace cdepth {

struct ModelConfig {
  int channels = 1;
  int height = 32;
  int width = 32;
  int text_dim = 32;    // frozen embedder width
  int latent_dim = 16;  // d
  std::array<int, 2> text_hidden{64, 32};
  std::array<int, 3> encoder_channels{8, 16, 32};
  std::array<int, 3> decoder_channels{32, 16, 8};
  double min_depth = 1e-3;

  int grid_height() const { return height / 8; }
  int grid_width() const { return width / 8; }

  void validate() const {
    if (height <= 0 || width <= 0 || height % 8 != 0 || width % 8 != 0) {
      throw ConfigError("image height and width must be positive multiples of 8, got " +
                        std::to_string(height) + "x" + std::to_string(width));
    }
    if (channels <= 0 || text_dim <= 0 || latent_dim <= 0) throw ConfigError("model widths must be positive");
    for (int c : text_hidden) if (c <= 0) throw ConfigError("text hidden widths must be positive");
    for (int c : encoder_channels) if (c <= 0) throw ConfigError("encoder channels must be positive");
    for (int c : decoder_channels) if (c <= 0) throw ConfigError("decoder channels must be positive");
    if (!(min_depth > 0.0)) throw ConfigError("min_depth must be positive");
  }
};

enum class ParamGroup : std::uint8_t { kTextHead, kSampler, kDecoder };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kTextHead: return "text_head";
    case ParamGroup::kSampler: return "sampler";
    case ParamGroup::kDecoder: return "decoder";
  }
  return "?";
}

template <typename Scalar>
struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor<Scalar> value;
};

/// Ordered, named parameter arrays. Order is fixed by the architecture and is
/// the checkpoint order.
template <typename Scalar>
struct ParameterSet {
  std::vector<Parameter<Scalar>> entries;

  const Tensor<Scalar>& at(const std::string& name) const {
    for (const auto& p : entries) if (p.name == name) return p.value;
    throw ContractError("no parameter named '" + name + "'");
  }
  Tensor<Scalar>& at(const std::string& name) {
    return const_cast<Tensor<Scalar>&>(static_cast<const ParameterSet&>(*this).at(name));
  }

  Index count(ParamGroup group) const {
    Index n = 0;
    for (const auto& p : entries) if (p.group == group) n += p.value.size();
    return n;
  }

  template <typename Other>
  ParameterSet<Other> cast() const {
    ParameterSet<Other> out;
    for (const auto& p : entries) out.entries.push_back({p.name, p.group, p.value.template cast<Other>()});
    return out;
  }

  bool bit_equal(const ParameterSet& other, ParamGroup group) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].group != group) continue;
      if (!entries[i].value.bit_equal(other.entries.at(i).value)) return false;
    }
    return true;
  }
};

/// Architecture listing: (name, group, shape, fan_in). Weights are
/// fan-in-scaled uniform; biases (fan_in 0) start at zero.
struct ParamSpec {
  std::string name;
  ParamGroup group;
  Shape shape;
  Index fan_in;
};

inline std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  const Index d = cfg.latent_dim;
  const auto& th = cfg.text_hidden;
  const auto& ec = cfg.encoder_channels;
  const auto& dc = cfg.decoder_channels;
  std::vector<ParamSpec> out;
  const auto dense = [&](const std::string& name, ParamGroup g, Index in, Index outs) {
    out.push_back({name + ".w", g, {outs, in}, in});
    out.push_back({name + ".b", g, {outs}, 0});
  };
  const auto conv = [&](const std::string& name, ParamGroup g, Index in, Index outs, Index k) {
    out.push_back({name + ".w", g, {outs, in, k, k}, in * k * k});
    out.push_back({name + ".b", g, {outs}, 0});
  };
  dense("text.fc1", ParamGroup::kTextHead, cfg.text_dim, th[0]);
  dense("text.fc2", ParamGroup::kTextHead, th[0], th[1]);
  dense("text.fc3", ParamGroup::kTextHead, th[1], 2 * d);

  conv("sampler.conv1", ParamGroup::kSampler, cfg.channels, ec[0], 3);
  conv("sampler.conv2", ParamGroup::kSampler, ec[0], ec[1], 3);
  conv("sampler.conv3", ParamGroup::kSampler, ec[1], ec[2], 3);
  conv("sampler.head", ParamGroup::kSampler, ec[2] + 2 * d, d, 1);

  conv("decoder.up1", ParamGroup::kDecoder, d + ec[2] + ec[1], dc[0], 3);
  conv("decoder.up2", ParamGroup::kDecoder, dc[0] + ec[0], dc[1], 3);
  conv("decoder.up3", ParamGroup::kDecoder, dc[1], dc[2], 3);
  conv("decoder.head", ParamGroup::kDecoder, dc[2], 1, 1);
  return out;
}

template <typename Scalar>
ParameterSet<Scalar> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  ParameterSet<Scalar> set;
  auto rng = make_rng(seed, 0x1417);
  for (const auto& spec : parameter_layout(cfg)) {
    Tensor<Scalar> value(spec.shape);
    if (spec.fan_in > 0) {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.fan_in));
      std::uniform_real_distribution<double> uni(-bound, bound);
      for (Index i = 0; i < value.size(); ++i) value[i] = static_cast<Scalar>(uni(rng));
    }
    set.entries.push_back({spec.name, spec.group, std::move(value)});
  }
  return set;
}

/// Same layout with every array zero.
template <typename Scalar>
ParameterSet<Scalar> zero_parameters(const ModelConfig& cfg) {
  ParameterSet<Scalar> set;
  for (const auto& spec : parameter_layout(cfg)) set.entries.push_back({spec.name, spec.group, Tensor<Scalar>(spec.shape)});
  return set;
}

/// Which groups receive gradients in a graph.
struct Trainable {
  bool text_head = false;
  bool sampler = false;
  bool decoder = false;

  static Trainable all() { return {true, true, true}; }
  static Trainable none() { return {}; }
  bool operator()(ParamGroup g) const {
    switch (g) {
      case ParamGroup::kTextHead: return text_head;
      case ParamGroup::kSampler: return sampler;
      case ParamGroup::kDecoder: return decoder;
    }
    return false;
  }
};

/// Parameters placed into one graph as leaves labelled by parameter name.
template <typename Scalar>
struct BoundParams {
  std::map<std::string, Var<Scalar>> vars;

  Var<Scalar> operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractError("parameter '" + name + "' not bound");
    return it->second;
  }
};

template <typename Scalar>
BoundParams<Scalar> bind(Graph<Scalar>& graph, const ParameterSet<Scalar>& params, Trainable trainable) {
  BoundParams<Scalar> out;
  for (const auto& p : params.entries) out.vars.emplace(p.name, graph.leaf(p.name, p.value, trainable(p.group)));
  return out;
}

}  // namespace cdepth
