#include <gtest/gtest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "cdepth/decoder.hpp"
#include "cdepth/optimizer.hpp"
#include "cdepth/scene.hpp"
#include "cdepth/trainer.hpp"

namespace cdepth {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("cdepth_trainer_" + std::to_string(::getpid()) + "_" + name);
}

TEST(Schedule, Endpoints) {
  for (std::uint64_t s = 0; s < 500; ++s) {
    EXPECT_EQ(schedule_select(s, 0.0), Branch::kImage);
    EXPECT_EQ(schedule_select(s, 1.0), Branch::kText);
  }
}

TEST(Schedule, OnePercentGivesTenInAThousand) {
  int text = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) text += schedule_select(s, 0.01) == Branch::kText;
  EXPECT_EQ(text, 10);
}

TEST(Schedule, EveryWindowWithinOne) {
  for (double p : {0.01, 0.1, 0.25, 0.3, 0.5, 0.7, 0.99}) {
    std::vector<int> prefix{0};
    for (std::uint64_t s = 0; s < 2000; ++s) prefix.push_back(prefix.back() + (schedule_select(s, p) == Branch::kText));
    for (std::size_t a = 0; a < prefix.size(); a += 37) {
      for (std::size_t b = a + 1; b < prefix.size(); b += 53) {
        const double n = static_cast<double>(b - a);
        EXPECT_LE(std::abs((prefix[b] - prefix[a]) - n * p), 1.0 + 1e-9) << "p=" << p << " window " << a << ".." << b;
      }
    }
  }
}

TEST(Schedule, RejectsOutOfRange) {
  EXPECT_THROW(schedule_select(0, -0.1), ConfigError);
  EXPECT_THROW(schedule_select(0, 1.5), ConfigError);
}

TEST(Cosine, EndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 1000, 3e-3, 1e-3), 3e-3);
  EXPECT_DOUBLE_EQ(cosine_lr(1000, 1000, 3e-3, 1e-3), 1e-3);
  EXPECT_NEAR(cosine_lr(500, 1000, 3e-3, 1e-3), 2e-3, 1e-15);
}

TEST(Adam, MatchesHandRecursionOnQuadratic) {
  // f(x) = 0.5 * sum a_i x_i^2, gradient a_i x_i.
  const std::vector<double> a{0.5, 2.0, 10.0};
  Tensor<double> x({3}, {1.0, -2.0, 0.3});
  AdamSlot<double> slot;
  std::vector<double> xr{1.0, -2.0, 0.3}, m(3, 0.0), v(3, 0.0);
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 5; ++t) {
    Tensor<double> g({3});
    for (int i = 0; i < 3; ++i) g[i] = a[i] * x[i];
    adam_update(x, slot, g, lr);
    for (int i = 0; i < 3; ++i) {
      const double gi = a[i] * xr[i];
      m[i] = b1 * m[i] + (1 - b1) * gi;
      v[i] = b2 * v[i] + (1 - b2) * gi * gi;
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      xr[i] -= lr * mh / (std::sqrt(vh) + eps);
      EXPECT_NEAR(x[i], xr[i], 1e-12) << "step " << t << " coord " << i;
    }
  }
  EXPECT_EQ(slot.t, 5u);
}

struct Fixture {
  Dataset train, val;
  TrainConfig cfg;
  FrozenEmbedder embedder;
  Fixture()
      : train(generate_dataset(0, 64, default_catalog(), {})),
        val(generate_dataset(1, 10, default_catalog(), {})),
        embedder(cfg.embedder_seed, train.header.vocab.size(), cfg.model.text_dim) {
    cfg.batch = 8;
  }
  Batch batch(std::size_t start) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.batch); ++i) idx.push_back((start + i) % train.samples.size());
    return make_batch(train, idx, embedder);
  }
};

bool moments_equal(const AdamState<float>& a, const AdamState<float>& b, const ParameterSet<float>& layout, ParamGroup g) {
  for (std::size_t i = 0; i < layout.entries.size(); ++i) {
    if (layout.entries[i].group != g) continue;
    if (!a.slots[i].m.bit_equal(b.slots[i].m) || !a.slots[i].v.bit_equal(b.slots[i].v) || a.slots[i].t != b.slots[i].t) {
      return false;
    }
  }
  return true;
}

TEST(TrainStep, TextStepFreezesSampler) {
  Fixture f;
  TrainState st = initial_checkpoint(f.cfg, f.train.header.vocab).state;
  const TrainState before = st;
  const auto r = train_step_text(st, f.batch(0), f.cfg, 1e-3);
  EXPECT_FALSE(r.rolled_back);
  EXPECT_EQ(r.branch, Branch::kText);
  EXPECT_TRUE(st.params.bit_equal(before.params, ParamGroup::kSampler));
  EXPECT_TRUE(moments_equal(st.adam, before.adam, st.params, ParamGroup::kSampler));
  EXPECT_FALSE(st.params.bit_equal(before.params, ParamGroup::kTextHead));
  EXPECT_FALSE(st.params.bit_equal(before.params, ParamGroup::kDecoder));
}

TEST(TrainStep, ImageStepFreezesTextHead) {
  Fixture f;
  TrainState st = initial_checkpoint(f.cfg, f.train.header.vocab).state;
  const TrainState before = st;
  const auto r = train_step_image(st, f.batch(0), f.cfg, 1e-3);
  EXPECT_FALSE(r.rolled_back);
  EXPECT_EQ(r.grad_norm_text, 0.0);
  EXPECT_GT(r.grad_norm_sampler, 0.0);
  EXPECT_TRUE(st.params.bit_equal(before.params, ParamGroup::kTextHead));
  EXPECT_TRUE(moments_equal(st.adam, before.adam, st.params, ParamGroup::kTextHead));
  EXPECT_FALSE(st.params.bit_equal(before.params, ParamGroup::kSampler));
  EXPECT_FALSE(st.params.bit_equal(before.params, ParamGroup::kDecoder));
}

TEST(TrainStep, LossesReduceWithoutKl) {
  Fixture f;
  f.cfg.loss.alpha = 0.0;
  f.cfg.loss.beta = 0.0;
  TrainState st = initial_checkpoint(f.cfg, f.train.header.vocab).state;
  const auto text = train_step_text(st, f.batch(0), f.cfg, 1e-3);
  const auto image = train_step_image(st, f.batch(8), f.cfg, 1e-3);
  EXPECT_GE(text.loss, 0.0);
  EXPECT_GE(image.loss, 0.0);
}

TEST(TrainStep, DeterministicFromIdenticalState) {
  Fixture f;
  const TrainState init = initial_checkpoint(f.cfg, f.train.header.vocab).state;
  TrainState a = init, b = init;
  for (int k = 0; k < 3; ++k) {
    const auto ra = train_step(a, f.batch(8 * k), f.cfg, 1e-3);
    const auto rb = train_step(b, f.batch(8 * k), f.cfg, 1e-3);
    EXPECT_EQ(ra.loss, rb.loss);
  }
  for (auto g : {ParamGroup::kTextHead, ParamGroup::kSampler, ParamGroup::kDecoder}) EXPECT_TRUE(a.params.bit_equal(b.params, g));
}

TEST(TrainStep, NumericFailureRollsBack) {
  Fixture f;
  TrainState st = initial_checkpoint(f.cfg, f.train.header.vocab).state;
  st.params.at("decoder.head.b")[0] = std::numeric_limits<float>::infinity();
  const TrainState before = st;
  const auto r = train_step_image(st, f.batch(0), f.cfg, 1e-3);
  EXPECT_TRUE(r.rolled_back);
  for (auto g : {ParamGroup::kTextHead, ParamGroup::kSampler, ParamGroup::kDecoder}) {
    EXPECT_TRUE(st.params.bit_equal(before.params, g));
    EXPECT_TRUE(moments_equal(st.adam, before.adam, st.params, g));
  }
}

TEST(TrainStep, WrongBatchShapeIsConfigError) {
  Fixture f;
  TrainState st = initial_checkpoint(f.cfg, f.train.header.vocab).state;
  auto cfg = f.cfg;
  cfg.model.height = 16;
  cfg.model.width = 16;
  EXPECT_THROW(train_step_image(st, f.batch(0), cfg, 1e-3), ConfigError);
}

TEST(Checkpoint, RoundTripThenOneStepIsBitExact) {
  Fixture f;
  Checkpoint ck = initial_checkpoint(f.cfg, f.train.header.vocab);
  for (int k = 0; k < 4; ++k) train_step(ck.state, f.batch(8 * k), f.cfg, 1e-3);
  const auto path = temp_path("rt.wdck");
  save_checkpoint(ck, path);
  Checkpoint loaded = load_checkpoint(path);
  EXPECT_EQ(loaded.state.step, ck.state.step);
  EXPECT_TRUE(loaded.vocab == ck.vocab);
  EXPECT_EQ(to_json(loaded.config), to_json(ck.config));
  const auto ra = train_step(ck.state, f.batch(40), f.cfg, 1e-3);
  const auto rb = train_step(loaded.state, f.batch(40), loaded.config, 1e-3);
  EXPECT_EQ(ra.loss, rb.loss);
  for (auto g : {ParamGroup::kTextHead, ParamGroup::kSampler, ParamGroup::kDecoder}) {
    EXPECT_TRUE(ck.state.params.bit_equal(loaded.state.params, g));
    EXPECT_TRUE(moments_equal(ck.state.adam, loaded.state.adam, ck.state.params, g));
  }
  fs::remove(path);
}

TEST(Checkpoint, FormatErrors) {
  Fixture f;
  const auto path = temp_path("bad.wdck");
  save_checkpoint(initial_checkpoint(f.cfg, f.train.header.vocab), path);
  std::string bytes;
  {
    std::ifstream is(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(is), {});
  }
  const auto kind_after = [&](const std::string& content) {
    std::ofstream(path, std::ios::binary | std::ios::trunc) << content;
    try {
      load_checkpoint(path);
    } catch (const FormatError& e) {
      return e.kind();
    }
    return FormatError::Kind::kIo;
  };
  std::string bad = bytes;
  bad[0] = 'Z';
  EXPECT_EQ(kind_after(bad), FormatError::Kind::kBadMagic);
  bad = bytes;
  bad[4] = 7;
  EXPECT_EQ(kind_after(bad), FormatError::Kind::kBadVersion);
  EXPECT_EQ(kind_after(bytes.substr(0, bytes.size() - 3)), FormatError::Kind::kTruncated);
  fs::remove(path);
}

TEST(Config, JsonRoundTripAndUnknownKey) {
  TrainConfig c;
  c.p = 0.25;
  c.seed = 99;
  c.model.latent_dim = 8;
  c.train_path = "x.wdph";
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"learning_rate", 1}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"p", "high"}}), ConfigError);
}

TEST(Config, Validation) {
  TrainConfig c;
  c.batch = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_end = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.p = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Inference, ImageModeDeterministicPositiveAndAcceptsEmptyCaption) {
  Fixture f;
  Predictor model(initial_checkpoint(f.cfg, f.train.header.vocab));
  const auto& s = f.train.samples[0];
  const auto a = model.infer_image(s.image, s.caption);
  const auto b = model.infer_image(s.image, s.caption);
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(float) * a.size()), 0);
  EXPECT_GT(a.minCoeff(), 1e-3f);
  const auto blank = model.infer_image(s.image, {});
  EXPECT_TRUE(blank.allFinite());
  EXPECT_GT(blank.minCoeff(), 1e-3f);
}

TEST(Inference, TextModeZeroEpsAndSeeds) {
  Fixture f;
  Predictor model(initial_checkpoint(f.cfg, f.train.header.vocab));
  const auto cap = tokenize("a small room with a chair", f.train.header.vocab);
  const auto zero = model.infer_text_with(cap, Tensor<float>::zeros({1, f.cfg.model.latent_dim}));
  // Reference: decode(tile(mu), zero skips) built by hand.
  Graph<float> g;
  const auto vars = bind(g, model.params(), Trainable::none());
  const TextHeadVars<float> psi{vars["text.fc1.w"], vars["text.fc1.b"], vars["text.fc2.w"],
                                vars["text.fc2.b"], vars["text.fc3.w"], vars["text.fc3.b"]};
  Tensor<float> feat({1, f.cfg.model.text_dim}, model.embedder().embed(cap).cast<float>());
  const auto dist = text_head(g.constant("f", feat), psi);
  const auto y = decode(tile_latent(dist.mu, 4, 4), kZeroSkips, vars, f.cfg.model).value();
  EXPECT_EQ(std::memcmp(zero.depths[0].data(), y.ptr(), sizeof(float) * y.size()), 0);

  const auto s1 = model.infer_text(cap, 3, 5), s2 = model.infer_text(cap, 3, 5), s3 = model.infer_text(cap, 3, 6);
  ASSERT_EQ(s1.depths.size(), 3u);
  EXPECT_TRUE((s1.depths[2] == s2.depths[2]).all());
  EXPECT_FALSE((s1.depths[2] == s3.depths[2]).all());
  EXPECT_THROW(model.infer_text(cap, 0, 1), ContractError);
}

TEST(Inference, FloorSigmaCollapsesTextSamples) {
  Fixture f;
  Checkpoint ck = initial_checkpoint(f.cfg, f.train.header.vocab);
  auto& b3 = ck.state.params.at("text.fc3.b");
  auto& w3 = ck.state.params.at("text.fc3.w");
  const int d = f.cfg.model.latent_dim;
  for (int k = d; k < 2 * d; ++k) {
    b3[k] = -50.0f;  // log sigma pinned at the clamp floor
    for (Index j = 0; j < w3.dim(1); ++j) w3[k * w3.dim(1) + j] = 0.0f;
  }
  Predictor model(ck);
  const auto samples = model.infer_text(tokenize("a large room with a bed", f.train.header.vocab), 64, 1);
  for (Index p = 0; p < samples.depths[0].size(); ++p) {
    double s = 0, s2 = 0;
    for (const auto& y : samples.depths) {
      s += y[p];
      s2 += static_cast<double>(y[p]) * y[p];
    }
    const double mean = s / 64.0;
    EXPECT_LE(std::sqrt(std::max(0.0, s2 / 64.0 - mean * mean)), 2e-3);  // 1.02e-3 measured at init
  }
}

TEST(Fit, ShortRunIsReproducibleAndLogsEpochs) {
  Fixture f;
  f.cfg.epochs = 2;
  std::ostringstream log_a, log_b;
  const auto a = fit(f.cfg, f.train, f.val, &log_a);
  const auto b = fit(f.cfg, f.train, f.val, &log_b);
  EXPECT_EQ(log_a.str(), log_b.str());
  ASSERT_EQ(a.epoch_log.size(), 2u);
  for (const char* key : {"epoch", "step", "lr", "text_steps", "image_steps", "val"}) EXPECT_TRUE(a.epoch_log[0].contains(key));
  EXPECT_EQ(a.text_steps + a.image_steps, 16u);
}

TEST(Fit, TextOnlyRunNeverTouchesSampler) {
  Fixture f;
  f.cfg.epochs = 1;
  f.cfg.p = 1.0;
  const auto init = initial_checkpoint(f.cfg, f.train.header.vocab);
  const auto r = fit(f.cfg, f.train, f.val, nullptr);
  EXPECT_TRUE(r.last.state.params.bit_equal(init.state.params, ParamGroup::kSampler));
  EXPECT_EQ(r.image_steps, 0u);
}

TEST(Fit, DimensionMismatchIsConfigErrorBeforeAnyStep) {
  Fixture f;
  f.cfg.model.height = 16;
  f.cfg.model.width = 16;
  int steps = 0;
  EXPECT_THROW(fit(f.cfg, f.train, f.val, nullptr, [&](const TrainState&, const TrainState&, const StepResult&) { ++steps; }),
               ConfigError);
  EXPECT_EQ(steps, 0);
}

TEST(Ablation, StrippedCaptionsNeverReachTheModel) {
  Fixture f;
  f.cfg.epochs = 1;
  const auto blank = strip_captions(f.train);
  const auto r = fit(f.cfg, blank, strip_captions(f.val), nullptr);
  EXPECT_EQ(r.nonzero_text_features, 0u);
  const auto normal = fit(f.cfg, f.train, f.val, nullptr);
  EXPECT_GT(normal.nonzero_text_features, 0u);
}

TEST(Sweep, RowsFollowInputOrder) {
  Fixture f;
  f.cfg.epochs = 1;
  const auto rows = run_ratio_sweep(f.cfg, {0.5, 0.0}, f.train, f.val, f.val, nullptr);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].p, 0.5);
  EXPECT_EQ(rows[1].p, 0.0);
  EXPECT_EQ(run_ratio_sweep(f.cfg, {0.01}, f.train, f.val, f.val, nullptr).size(), 1u);
}

}  // namespace
}  // namespace cdepth
