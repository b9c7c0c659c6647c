#pragma once

// Image-conditional sampler: three stride-2 conv stages over the image, then
// a 1x1 head over [deepest features | mu | sigma] producing the patch-wise
// eps grid. mu and sigma enter through detach nodes.

#include <vector>

#include "cdepth/graph.hpp"
#include "cdepth/params.hpp"

namespace cdepth {

/// Encoder features at 1/2, 1/4 and 1/8 resolution.
template <typename Scalar>
struct SkipFeatures {
  std::vector<Var<Scalar>> maps;
};

template <typename Scalar>
struct SamplerOutput {
  Var<Scalar> eps;  // [N, d, H/8, W/8], no output activation
  SkipFeatures<Scalar> skips;
};

/// x: [N, C, H, W]; mu, sigma: [N, d].
template <typename Scalar>
SamplerOutput<Scalar> encode_image(Var<Scalar> x, Var<Scalar> mu, Var<Scalar> sigma,
                                   const BoundParams<Scalar>& phi, const ModelConfig& cfg) {
  cfg.validate();
  const Shape xs = x.shape();
  if (xs.size() != 4 || xs[1] != cfg.channels || xs[2] != cfg.height || xs[3] != cfg.width) {
    throw ContractError("encode_image: image shape " + to_string(xs) + " does not match model " +
                        std::to_string(cfg.channels) + "x" + std::to_string(cfg.height) + "x" +
                        std::to_string(cfg.width));
  }
  const Shape expect{xs[0], cfg.latent_dim};
  if (mu.shape() != expect || sigma.shape() != expect) {
    throw ContractError("encode_image: mu/sigma must be " + to_string(expect));
  }
  SamplerOutput<Scalar> out;
  Var<Scalar> h = relu(conv2d(x, phi["sampler.conv1.w"], phi["sampler.conv1.b"], 2));
  out.skips.maps.push_back(h);
  h = relu(conv2d(h, phi["sampler.conv2.w"], phi["sampler.conv2.b"], 2));
  out.skips.maps.push_back(h);
  h = relu(conv2d(h, phi["sampler.conv3.w"], phi["sampler.conv3.b"], 2));
  out.skips.maps.push_back(h);

  const Index gh = cfg.grid_height(), gw = cfg.grid_width();
  Var<Scalar> cond = concat_channels<Scalar>({h, tile_grid(detach(mu), gh, gw), tile_grid(detach(sigma), gh, gw)});
  out.eps = conv2d(cond, phi["sampler.head.w"], phi["sampler.head.b"], 1);
  return out;
}

/// Receptive field (inclusive pixel rectangle) of eps cell (row, col). Each
/// 3x3 stride-2 stage with SAME padding (pad_top 0 for even sizes) maps an
/// output index o to input rows [2o, 2o + 2].
struct PixelRect {
  int row0, row1, col0, col1;
};

inline PixelRect eps_receptive_field(int row, int col, const ModelConfig& cfg) {
  int r0 = row, r1 = row, c0 = col, c1 = col;
  int hs = cfg.grid_height(), ws = cfg.grid_width();
  for (int stage = 0; stage < 3; ++stage) {
    const int in_h = hs * 2, in_w = ws * 2;
    const int pad_h = static_cast<int>(detail::same_geometry(in_h, 3, 2).second);
    const int pad_w = static_cast<int>(detail::same_geometry(in_w, 3, 2).second);
    r0 = std::max(0, 2 * r0 - pad_h);
    r1 = std::min(in_h - 1, 2 * r1 + 2 - pad_h);
    c0 = std::max(0, 2 * c0 - pad_w);
    c1 = std::min(in_w - 1, 2 * c1 + 2 - pad_w);
    hs = in_h;
    ws = in_w;
  }
  return {r0, r1, c0, c1};
}

}  // namespace cdepth
