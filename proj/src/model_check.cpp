#include "cdepth/model_check.hpp"

#include <random>

#include "cdepth/decoder.hpp"
#include "cdepth/rng.hpp"
#include "cdepth/sampler.hpp"
#include "cdepth/text_prior.hpp"

namespace cdepth {
namespace {

constexpr Index kBatch = 2;

struct Inputs {
  Tensor<double> images, features, eps;
  DepthTarget<double> target;
};

Inputs make_inputs(const ModelConfig& cfg, std::uint64_t seed) {
  auto rng = make_rng(seed, 0xC4EC);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Inputs in{Tensor<double>({kBatch, cfg.channels, cfg.height, cfg.width}), Tensor<double>({kBatch, cfg.text_dim}),
            Tensor<double>({kBatch, cfg.latent_dim}), {}};
  for (Index i = 0; i < in.images.size(); ++i) in.images[i] = unit(rng);
  for (Index i = 0; i < in.features.size(); ++i) in.features[i] = normal(rng);
  for (Index i = 0; i < in.eps.size(); ++i) in.eps[i] = normal(rng);
  const Shape ds{kBatch, 1, cfg.height, cfg.width};
  in.target.depth = Tensor<double>(ds);
  in.target.mask = Tensor<double>(ds);
  for (Index i = 0; i < in.target.depth.size(); ++i) {
    in.target.depth[i] = 0.5 + 4.0 * unit(rng);
    in.target.mask[i] = unit(rng) < 0.9 ? 1.0 : 0.0;
  }
  return in;
}

ParameterSet<double> make_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto params = init_parameters<double>(cfg, seed);
  // Non-zero biases so no unit starts exactly on a relu kink.
  auto rng = make_rng(seed, 0xB1A5);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& p : params.entries) {
    if (p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".b") == 0) {
      for (Index i = 0; i < p.value.size(); ++i) p.value[i] = u(rng);
    }
  }
  return params;
}

TextHeadVars<double> head_vars(const BoundParams<double>& v) {
  return {v["text.fc1.w"], v["text.fc1.b"], v["text.fc2.w"], v["text.fc2.b"], v["text.fc3.w"], v["text.fc3.b"]};
}

}  // namespace

ModelConfig toy_model_config() {
  ModelConfig cfg;
  cfg.height = 16;
  cfg.width = 16;
  cfg.text_dim = 4;
  cfg.latent_dim = 2;
  cfg.text_hidden = {4, 3};
  cfg.encoder_channels = {2, 2, 2};
  cfg.decoder_channels = {2, 2, 2};
  return cfg;
}

ObjectiveCheck check_vae_objective(std::uint64_t seed, double h, const LossConfig& loss) {
  const ModelConfig cfg = toy_model_config();
  const Inputs in = make_inputs(cfg, seed);
  Graph<double> g;
  const auto vars = bind(g, make_params(cfg, seed), Trainable{true, false, true});
  const auto dist = text_head(g.constant("caption_feature", in.features), head_vars(vars));
  Var<double> z = tile_latent(reparameterize(dist, g.constant("eps", in.eps)), cfg.grid_height(), cfg.grid_width());
  Var<double> y = decode(z, kZeroSkips, vars, cfg);
  ObjectiveCheck out;
  out.objective = "vae";
  out.seed = seed;
  out.report = check_gradients(g, vae_objective(y, in.target, dist.mu, dist.sigma, loss), h);
  return out;
}

ObjectiveCheck check_cs_objective(std::uint64_t seed, double h, const LossConfig& loss) {
  const ModelConfig cfg = toy_model_config();
  const Inputs in = make_inputs(cfg, seed);
  const auto params = make_params(cfg, seed);
  ObjectiveCheck out;
  out.objective = "cs";
  out.seed = seed;
  {
    Graph<double> g;
    const auto vars = bind(g, params, Trainable::all());
    const auto dist = text_head(g.constant("caption_feature", in.features), head_vars(vars));
    const auto enc = encode_image(g.constant("image", in.images), dist.mu, dist.sigma, vars, cfg);
    Var<double> y = decode(combine_latent(dist.mu, dist.sigma, enc.eps), enc.skips, vars, cfg);
    out.report = check_gradients(g, cs_objective(y, in.target, enc.eps, loss), h);
  }
  {
    // Same loss with the combine step fed constants: the text head now
    // reaches the loss only through the sampler's detached inputs.
    Graph<double> g;
    const auto vars = bind(g, params, Trainable::all());
    const auto dist = text_head(g.constant("caption_feature", in.features), head_vars(vars));
    const auto enc = encode_image(g.constant("image", in.images), dist.mu, dist.sigma, vars, cfg);
    Var<double> mu = g.constant("mu_value", dist.mu.value());
    Var<double> sigma = g.constant("sigma_value", dist.sigma.value());
    Var<double> y = decode(combine_latent(mu, sigma, enc.eps), enc.skips, vars, cfg);
    g.backward(cs_objective(y, in.target, enc.eps, loss));
    for (const auto& p : params.entries) {
      if (p.group != ParamGroup::kTextHead) continue;
      const auto grad = g.grad(vars[p.name]);
      for (Index i = 0; i < grad.size(); ++i) {
        if (grad[i] != 0.0 || std::signbit(grad[i])) out.detach_exact_zero = false;
      }
    }
  }
  return out;
}

}  // namespace cdepth
