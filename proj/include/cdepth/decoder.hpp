#pragma once

// Depth decoder: latent grid (+ skips) -> positive metric depth.
//
//   [z | skip 1/8] -> up x2 -> [. | skip 1/4] -> conv3 relu
//                  -> up x2 -> [. | skip 1/2] -> conv3 relu
//                  -> up x2 -> conv3 relu -> conv1 -> min_depth + softplus

#include <optional>
#include <type_traits>

#include "cdepth/graph.hpp"
#include "cdepth/params.hpp"
#include "cdepth/sampler.hpp"

namespace cdepth {

/// Every grid cell of the result equals z: [N, d] -> [N, d, h, w].
template <typename Scalar>
Var<Scalar> tile_latent(Var<Scalar> z, Index h, Index w) {
  return tile_grid(z, h, w);
}

/// Per-cell mu + eps[:, :, i, j] * sigma.
template <typename Scalar>
Var<Scalar> combine_latent(Var<Scalar> mu, Var<Scalar> sigma, Var<Scalar> eps) {
  const Shape es = eps.shape();
  if (es.size() != 4 || mu.shape() != Shape{es[0], es[1]} || sigma.shape() != mu.shape()) {
    throw ContractError("combine_latent: mu " + to_string(mu.shape()) + ", sigma " + to_string(sigma.shape()) +
                        " incompatible with eps " + to_string(es));
  }
  return tile_grid(mu, es[2], es[3]) + eps * tile_grid(sigma, es[2], es[3]);
}

/// Skip feature shapes the decoder expects for a batch of n.
inline std::vector<Shape> skip_shapes(const ModelConfig& cfg, Index n) {
  const auto& ec = cfg.encoder_channels;
  return {{n, ec[0], cfg.height / 2, cfg.width / 2},
          {n, ec[1], cfg.height / 4, cfg.width / 4},
          {n, ec[2], cfg.height / 8, cfg.width / 8}};
}

/// Skip sentinel for the text branch: zero maps of the expected shapes.
inline constexpr std::nullopt_t kZeroSkips = std::nullopt;

/// z: [N, d, H/8, W/8]. Returns depth [N, 1, H, W].
template <typename Scalar>
Var<Scalar> decode(Var<Scalar> z, const std::type_identity_t<std::optional<SkipFeatures<Scalar>>>& skips,
                   const BoundParams<Scalar>& params, const ModelConfig& cfg) {
  Graph<Scalar>& g = *z.graph;
  const Shape zs = z.shape();
  if (zs.size() != 4 || zs[1] != cfg.latent_dim || zs[2] != cfg.grid_height() || zs[3] != cfg.grid_width()) {
    throw ContractError("decode: latent grid shape " + to_string(zs) + " does not match model");
  }
  const auto shapes = skip_shapes(cfg, zs[0]);
  std::vector<Var<Scalar>> maps;
  if (skips) {
    if (skips->maps.size() != shapes.size()) throw ContractError("decode: expected 3 skip maps");
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (skips->maps[i].shape() != shapes[i]) {
        throw ContractError("decode: skip " + std::to_string(i) + " shape " + to_string(skips->maps[i].shape()) +
                            " expected " + to_string(shapes[i]));
      }
      maps.push_back(skips->maps[i]);
    }
  } else {
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      maps.push_back(g.constant("zero_skip" + std::to_string(i), Tensor<Scalar>::zeros(shapes[i])));
    }
  }
  Var<Scalar> h = concat_channels<Scalar>({z, maps[2]});
  h = concat_channels<Scalar>({upsample2x(h), maps[1]});
  h = relu(conv2d(h, params["decoder.up1.w"], params["decoder.up1.b"], 1));
  h = concat_channels<Scalar>({upsample2x(h), maps[0]});
  h = relu(conv2d(h, params["decoder.up2.w"], params["decoder.up2.b"], 1));
  h = relu(conv2d(upsample2x(h), params["decoder.up3.w"], params["decoder.up3.b"], 1));
  Var<Scalar> u = conv2d(h, params["decoder.head.w"], params["decoder.head.b"], 1);
  return softplus(u) + cfg.min_depth;
}

}  // namespace cdepth
