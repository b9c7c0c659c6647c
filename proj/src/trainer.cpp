#include "cdepth/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "cdepth/decoder.hpp"
#include "cdepth/rng.hpp"
#include "cdepth/sampler.hpp"

namespace cdepth {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("p must lie in [0, 1]");
  if (batch < 2) throw ConfigError("batch size must be at least 2");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(lr_end > 0.0 && lr_start >= lr_end)) throw ConfigError("learning rates must satisfy lr_start >= lr_end > 0");
  loss.validate();
  model.validate();
}

json to_json(const TrainConfig& c) {
  return json{
      {"p", c.p},
      {"batch", c.batch},
      {"epochs", c.epochs},
      {"lr_start", c.lr_start},
      {"lr_end", c.lr_end},
      {"gamma", c.loss.gamma},
      {"alpha", c.loss.alpha},
      {"beta", c.loss.beta},
      {"sigma_floor", c.loss.sigma_floor},
      {"channels", c.model.channels},
      {"height", c.model.height},
      {"width", c.model.width},
      {"text_dim", c.model.text_dim},
      {"latent_dim", c.model.latent_dim},
      {"text_hidden", c.model.text_hidden},
      {"encoder_channels", c.model.encoder_channels},
      {"decoder_channels", c.model.decoder_channels},
      {"min_depth", c.model.min_depth},
      {"seed", c.seed},
      {"embedder_seed", c.embedder_seed},
      {"train_path", c.train_path},
      {"val_path", c.val_path},
  };
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "p") c.p = value.get<double>();
      else if (key == "batch") c.batch = value.get<int>();
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "lr_start") c.lr_start = value.get<double>();
      else if (key == "lr_end") c.lr_end = value.get<double>();
      else if (key == "gamma") c.loss.gamma = value.get<double>();
      else if (key == "alpha") c.loss.alpha = value.get<double>();
      else if (key == "beta") c.loss.beta = value.get<double>();
      else if (key == "sigma_floor") c.loss.sigma_floor = value.get<double>();
      else if (key == "channels") c.model.channels = value.get<int>();
      else if (key == "height") c.model.height = value.get<int>();
      else if (key == "width") c.model.width = value.get<int>();
      else if (key == "text_dim") c.model.text_dim = value.get<int>();
      else if (key == "latent_dim") c.model.latent_dim = value.get<int>();
      else if (key == "text_hidden") c.model.text_hidden = value.get<std::array<int, 2>>();
      else if (key == "encoder_channels") c.model.encoder_channels = value.get<std::array<int, 3>>();
      else if (key == "decoder_channels") c.model.decoder_channels = value.get<std::array<int, 3>>();
      else if (key == "min_depth") c.model.min_depth = value.get<double>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "embedder_seed") c.embedder_seed = value.get<std::uint64_t>();
      else if (key == "train_path") c.train_path = value.get<std::string>();
      else if (key == "val_path") c.val_path = value.get<std::string>();
      else throw ConfigError("unknown training config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("training config key '" + key + "': " + e.what());
    }
  }
  return c;
}

json to_json(const MetricsReport& r) {
  return json{{"abs_rel", r.abs_rel}, {"rmse", r.rmse},     {"log10", r.log10},   {"rmse_log", r.rmse_log},
              {"delta1", r.delta1},   {"delta2", r.delta2}, {"delta3", r.delta3}, {"pixels", r.pixels}};
}

// ---------------------------------------------------------------------------
// Batches and steps

Checkpoint initial_checkpoint(const TrainConfig& cfg, const Vocabulary& vocab) {
  cfg.validate();
  Checkpoint ck;
  ck.config = cfg;
  ck.vocab = vocab;
  ck.state.params = init_parameters<float>(cfg.model, cfg.seed);
  ck.state.adam = AdamState<float>::for_params(ck.state.params);
  return ck;
}

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, const FrozenEmbedder& embedder) {
  const auto& hd = data.header;
  const Index b = static_cast<Index>(indices.size());
  const Index pixels = data.pixels();
  const Index image_size = pixels * hd.channels;
  Batch out;
  out.images = Tensor<float>({b, hd.channels, hd.height, hd.width});
  out.target.depth = Tensor<float>({b, 1, hd.height, hd.width});
  out.target.mask = Tensor<float>({b, 1, hd.height, hd.width});
  out.features = Tensor<float>({b, embedder.width()});
  for (Index k = 0; k < b; ++k) {
    const Sample& s = data.samples.at(indices[static_cast<std::size_t>(k)]);
    out.images.data.segment(k * image_size, image_size) = s.image.matrix();
    out.target.depth.data.segment(k * pixels, pixels) = s.depth.matrix();
    out.target.mask.data.segment(k * pixels, pixels) = s.mask.cast<float>().matrix();
    out.features.data.segment(k * embedder.width(), embedder.width()) = embedder.embed(s.caption).cast<float>();
  }
  return out;
}

namespace {

struct GroupNorms {
  double text = 0.0, sampler = 0.0, decoder = 0.0;
};

/// Runs backward, checks gradients, applies Adam to the trainable groups.
/// Returns false (state untouched) when any gradient is non-finite.
bool apply_update(Graph<float>& g, Var<float> loss, const BoundParams<float>& vars, Trainable trainable,
                  TrainState& state, double lr, GroupNorms& norms) {
  g.backward(loss);
  std::vector<Tensor<float>> grads;
  grads.reserve(state.params.entries.size());
  for (const auto& p : state.params.entries) {
    grads.push_back(g.grad(vars[p.name]));
    if (!grads.back().data.allFinite()) return false;
    const double sq = grads.back().data.template cast<double>().squaredNorm();
    switch (p.group) {
      case ParamGroup::kTextHead: norms.text += sq; break;
      case ParamGroup::kSampler: norms.sampler += sq; break;
      case ParamGroup::kDecoder: norms.decoder += sq; break;
    }
  }
  for (std::size_t i = 0; i < state.params.entries.size(); ++i) {
    auto& p = state.params.entries[i];
    if (trainable(p.group)) adam_update(p.value, state.adam.slots[i], grads[i], lr);
  }
  norms.text = std::sqrt(norms.text);
  norms.sampler = std::sqrt(norms.sampler);
  norms.decoder = std::sqrt(norms.decoder);
  return true;
}

StepResult finish(Branch branch, double loss, const GroupNorms& n, bool ok) {
  StepResult r;
  r.branch = branch;
  r.loss = loss;
  r.grad_norm_text = n.text;
  r.grad_norm_sampler = n.sampler;
  r.grad_norm_decoder = n.decoder;
  r.rolled_back = !ok;
  return r;
}

Tensor<float> standard_normal(Shape shape, std::uint64_t seed, std::uint64_t stream) {
  Tensor<float> t(std::move(shape));
  auto rng = make_rng(seed, stream);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (Index i = 0; i < t.size(); ++i) t[i] = normal(rng);
  return t;
}

void check_batch(const Batch& batch, const ModelConfig& m) {
  const Shape& s = batch.images.shape;
  if (s.size() != 4 || s[1] != m.channels || s[2] != m.height || s[3] != m.width) {
    throw ConfigError("batch images " + to_string(s) + " do not match model " + std::to_string(m.channels) + "x" +
                      std::to_string(m.height) + "x" + std::to_string(m.width));
  }
  if (batch.features.shape != Shape{s[0], m.text_dim}) throw ConfigError("batch caption features have the wrong width");
}

}  // namespace

StepResult train_step_text(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr) {
  check_batch(batch, cfg.model);
  const Trainable trainable{true, false, true};
  GroupNorms norms;
  try {
    Graph<float> g;
    const auto vars = bind(g, state.params, trainable);
    const Index b = batch.images.dim(0);
    Var<float> feature = g.constant("caption_feature", batch.features);
    const TextHeadVars<float> psi{vars["text.fc1.w"], vars["text.fc1.b"], vars["text.fc2.w"],
                                  vars["text.fc2.b"], vars["text.fc3.w"], vars["text.fc3.b"]};
    const auto dist = text_head(feature, psi);
    Var<float> eps = g.constant("eps", standard_normal({b, cfg.model.latent_dim}, cfg.seed, 0x5EED0000ULL + state.step));
    Var<float> grid = tile_latent(reparameterize(dist, eps), cfg.model.grid_height(), cfg.model.grid_width());
    Var<float> y = decode(grid, std::optional<SkipFeatures<float>>(kZeroSkips), vars, cfg.model);
    Var<float> loss = vae_objective(y, batch.target, dist.mu, dist.sigma, cfg.loss);
    const double value = loss.value()[0];
    const bool ok = apply_update(g, loss, vars, trainable, state, lr, norms);
    return finish(Branch::kText, value, norms, ok);
  } catch (const NumericError&) {
    return finish(Branch::kText, std::nan(""), norms, false);
  }
}

StepResult train_step_image(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr) {
  check_batch(batch, cfg.model);
  const Trainable trainable{false, true, true};
  GroupNorms norms;
  try {
    Graph<float> g;
    const auto vars = bind(g, state.params, trainable);
    Var<float> feature = g.constant("caption_feature", batch.features);
    const TextHeadVars<float> psi{vars["text.fc1.w"], vars["text.fc1.b"], vars["text.fc2.w"],
                                  vars["text.fc2.b"], vars["text.fc3.w"], vars["text.fc3.b"]};
    const auto dist = text_head(feature, psi);
    Var<float> x = g.constant("image", batch.images);
    const auto enc = encode_image(x, dist.mu, dist.sigma, vars, cfg.model);
    Var<float> z = combine_latent(dist.mu, dist.sigma, enc.eps);
    Var<float> y = decode(z, std::optional<SkipFeatures<float>>(enc.skips), vars, cfg.model);
    Var<float> loss = cs_objective(y, batch.target, enc.eps, cfg.loss);
    const double value = loss.value()[0];
    const bool ok = apply_update(g, loss, vars, trainable, state, lr, norms);
    return finish(Branch::kImage, value, norms, ok);
  } catch (const NumericError&) {
    return finish(Branch::kImage, std::nan(""), norms, false);
  }
}

StepResult train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr) {
  const Branch branch = schedule_select(state.step, cfg.p);
  StepResult r = branch == Branch::kText ? train_step_text(state, batch, cfg, lr)
                                         : train_step_image(state, batch, cfg, lr);
  ++state.step;
  return r;
}

// ---------------------------------------------------------------------------
// Inference

Predictor::Predictor(const Checkpoint& ckpt)
    : Predictor(ckpt.config.model, ckpt.state.params,
                FrozenEmbedder(ckpt.config.embedder_seed, ckpt.vocab.size(), ckpt.config.model.text_dim), ckpt.vocab) {}

Predictor::Predictor(ModelConfig cfg, ParameterSet<float> params, FrozenEmbedder embedder, Vocabulary vocab)
    : cfg_(cfg), params_(std::move(params)), embedder_(std::move(embedder)), vocab_(std::move(vocab)) {
  cfg_.validate();
  if (embedder_.width() != cfg_.text_dim) throw ConfigError("embedder width does not match model text_dim");
}

Tensor<float> Predictor::features(const std::vector<std::vector<TokenId>>& captions) const {
  const Index n = static_cast<Index>(captions.size());
  Tensor<float> f({n, cfg_.text_dim});
  for (Index k = 0; k < n; ++k) {
    f.data.segment(k * cfg_.text_dim, cfg_.text_dim) = embedder_.embed(captions[static_cast<std::size_t>(k)]).cast<float>();
  }
  return f;
}

Tensor<float> Predictor::infer_image(const Tensor<float>& images,
                                     const std::vector<std::vector<TokenId>>& captions) const {
  if (images.rank() != 4 || static_cast<std::size_t>(images.dim(0)) != captions.size()) {
    throw ContractError("infer_image: need one caption per image");
  }
  Graph<float> g;
  const auto vars = bind(g, params_, Trainable::none());
  const TextHeadVars<float> psi{vars["text.fc1.w"], vars["text.fc1.b"], vars["text.fc2.w"],
                                vars["text.fc2.b"], vars["text.fc3.w"], vars["text.fc3.b"]};
  const auto dist = text_head(g.constant("caption_feature", features(captions)), psi);
  const auto enc = encode_image(g.constant("image", images), dist.mu, dist.sigma, vars, cfg_);
  Var<float> z = combine_latent(dist.mu, dist.sigma, enc.eps);
  return decode(z, std::optional<SkipFeatures<float>>(enc.skips), vars, cfg_).value();
}

Eigen::ArrayXf Predictor::infer_image(const Eigen::ArrayXf& image, const std::vector<TokenId>& caption) const {
  const Index size = Index{cfg_.channels} * cfg_.height * cfg_.width;
  if (image.size() != size) throw ContractError("infer_image: image size does not match model");
  Tensor<float> x({1, cfg_.channels, cfg_.height, cfg_.width}, image.matrix());
  return infer_image(x, {caption}).data.array();
}

Predictor::TextSamples Predictor::infer_text(const std::vector<TokenId>& caption, int n, std::uint64_t seed) const {
  if (n < 1) throw ContractError("infer_text: need at least one sample");
  return infer_text_with(caption, standard_normal({n, cfg_.latent_dim}, seed, 0x7E47));
}

Predictor::TextSamples Predictor::infer_text_with(const std::vector<TokenId>& caption, const Tensor<float>& eps) const {
  if (eps.rank() != 2 || eps.dim(1) != cfg_.latent_dim) throw ContractError("infer_text: eps must be [n, d]");
  const Index n = eps.dim(0);
  Graph<float> g;
  const auto vars = bind(g, params_, Trainable::none());
  const TextHeadVars<float> psi{vars["text.fc1.w"], vars["text.fc1.b"], vars["text.fc2.w"],
                                vars["text.fc2.b"], vars["text.fc3.w"], vars["text.fc3.b"]};
  std::vector<std::vector<TokenId>> captions(static_cast<std::size_t>(n), caption);
  const auto dist = text_head(g.constant("caption_feature", features(captions)), psi);
  Var<float> z = reparameterize(dist, g.constant("eps", eps));
  Var<float> y = decode(tile_latent(z, cfg_.grid_height(), cfg_.grid_width()),
                        std::optional<SkipFeatures<float>>(kZeroSkips), vars, cfg_);
  TextSamples out;
  const Index pixels = Index{cfg_.height} * cfg_.width;
  for (Index k = 0; k < n; ++k) out.depths.push_back(y.value().data.segment(k * pixels, pixels).array());
  out.mu = dist.mu.value().data.head(cfg_.latent_dim);
  out.sigma = dist.sigma.value().data.head(cfg_.latent_dim);
  return out;
}

MetricsReport evaluate_dataset(const Predictor& model, const Dataset& data,
                               const std::function<void(std::size_t, const Eigen::ArrayXd&)>& on_error_map) {
  const auto& m = model.config();
  if (data.header.channels != m.channels || data.header.height != m.height || data.header.width != m.width) {
    throw ConfigError("dataset dimensions do not match the model");
  }
  if (data.samples.empty()) throw ConfigError("cannot evaluate an empty dataset");
  constexpr std::size_t kChunk = 50;
  const Index pixels = data.pixels();
  const Index image_size = pixels * data.header.channels;
  MetricsAccumulator acc;
  for (std::size_t start = 0; start < data.samples.size(); start += kChunk) {
    const std::size_t stop = std::min(data.samples.size(), start + kChunk);
    const Index n = static_cast<Index>(stop - start);
    Tensor<float> images({n, m.channels, m.height, m.width});
    std::vector<std::vector<TokenId>> captions;
    for (std::size_t i = start; i < stop; ++i) {
      images.data.segment(static_cast<Index>(i - start) * image_size, image_size) = data.samples[i].image.matrix();
      captions.push_back(data.samples[i].caption);
    }
    const Tensor<float> pred = model.infer_image(images, captions);
    for (std::size_t i = start; i < stop; ++i) {
      const Sample& s = data.samples[i];
      const Eigen::ArrayXd y = pred.data.segment(static_cast<Index>(i - start) * pixels, pixels).cast<double>().array();
      const Eigen::ArrayXd t = s.depth.cast<double>();
      const Eigen::Array<bool, Eigen::Dynamic, 1> mask = s.mask != 0;
      acc.add(compute_metrics(y, t, mask));
      if (on_error_map) on_error_map(i, error_map(y, t, mask));
    }
  }
  return acc.mean();
}

// ---------------------------------------------------------------------------
// Fit

FitResult fit(const TrainConfig& cfg, const Dataset& train, const Dataset& val, std::ostream* log,
              const StepObserver& observer) {
  cfg.validate();
  for (const Dataset* d : {&train, &val}) {
    if (d->header.channels != cfg.model.channels || d->header.height != cfg.model.height ||
        d->header.width != cfg.model.width) {
      throw ConfigError("dataset dimensions " + std::to_string(d->header.channels) + "x" +
                        std::to_string(d->header.height) + "x" + std::to_string(d->header.width) +
                        " do not match the model config");
    }
  }
  if (!(train.header.vocab == val.header.vocab)) throw ConfigError("train and validation vocabularies differ");
  if (train.samples.size() < static_cast<std::size_t>(cfg.batch)) throw ConfigError("training set smaller than one batch");
  if (val.samples.empty()) throw ConfigError("validation set is empty");

  Checkpoint current = initial_checkpoint(cfg, train.header.vocab);
  const FrozenEmbedder embedder(cfg.embedder_seed, train.header.vocab.size(), cfg.model.text_dim);

  const std::size_t per_epoch = train.samples.size() / static_cast<std::size_t>(cfg.batch);
  const std::uint64_t total = per_epoch * static_cast<std::uint64_t>(cfg.epochs);

  FitResult result;
  double best_abs_rel = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train.samples.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = make_rng(cfg.seed, 0xE90C0000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double text_loss = 0.0, image_loss = 0.0;
    std::uint64_t text_n = 0, image_n = 0, rolled = 0;
    double lr = cfg.lr_start;
    for (std::size_t k = 0; k < per_epoch; ++k) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(k * cfg.batch),
                                   order.begin() + static_cast<std::ptrdiff_t>((k + 1) * cfg.batch));
      const Batch batch = make_batch(train, idx, embedder);
      if (batch.features.data.cwiseAbs().maxCoeff() > 0.0f) ++result.nonzero_text_features;
      lr = cosine_lr(current.state.step, total, cfg.lr_start, cfg.lr_end);
      std::optional<TrainState> before;
      if (observer) before = current.state;
      const StepResult r = train_step(current.state, batch, cfg, lr);
      if (observer) observer(*before, current.state, r);
      if (r.rolled_back) {
        ++rolled;
        continue;
      }
      if (r.branch == Branch::kText) {
        text_loss += r.loss;
        ++text_n;
      } else {
        image_loss += r.loss;
        ++image_n;
      }
    }
    result.text_steps += text_n;
    result.image_steps += image_n;
    result.rolled_back_steps += rolled;

    const MetricsReport val_report = evaluate_dataset(Predictor(current), val);
    json line{{"epoch", epoch},
              {"step", current.state.step},
              {"lr", lr},
              {"text_steps", text_n},
              {"image_steps", image_n},
              {"rolled_back", rolled},
              {"loss_text", text_n ? json(text_loss / static_cast<double>(text_n)) : json(nullptr)},
              {"loss_image", image_n ? json(image_loss / static_cast<double>(image_n)) : json(nullptr)},
              {"val", to_json(val_report)}};
    if (log) *log << line.dump() << '\n' << std::flush;
    result.epoch_log.push_back(std::move(line));
    if (val_report.abs_rel < best_abs_rel) {
      best_abs_rel = val_report.abs_rel;
      result.best = current;
      result.best_epoch = epoch;
      result.best_val = val_report;
    }
  }
  result.last = std::move(current);
  return result;
}

// ---------------------------------------------------------------------------
// Experiments

std::vector<SweepRow> run_ratio_sweep(const TrainConfig& cfg, const std::vector<double>& p_list, const Dataset& train,
                                      const Dataset& val, const Dataset& test, std::ostream* log) {
  std::vector<SweepRow> rows;
  for (double p : p_list) {
    TrainConfig run = cfg;
    run.p = p;
    const FitResult fr = fit(run, train, val, log);
    rows.push_back({p, evaluate_dataset(Predictor(fr.best), test), fr.best_val, fr.best});
  }
  return rows;
}

Dataset strip_captions(const Dataset& data) {
  Dataset out = data;
  for (auto& s : out.samples) s.caption.clear();
  return out;
}

AblationResult run_caption_ablation(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                    const Dataset& test, std::ostream* log, const FitResult* with_caption) {
  AblationResult out;
  out.with_fit = with_caption ? *with_caption : fit(cfg, train, val, log);
  out.with_caption = evaluate_dataset(Predictor(out.with_fit.best), test);

  const Dataset train_blank = strip_captions(train);
  const Dataset val_blank = strip_captions(val);
  const Dataset test_blank = strip_captions(test);
  const FitResult blank = fit(cfg, train_blank, val_blank, log);
  out.ablated_nonzero_features = blank.nonzero_text_features;
  out.empty_caption = evaluate_dataset(Predictor(blank.best), test_blank);
  return out;
}

}  // namespace cdepth
