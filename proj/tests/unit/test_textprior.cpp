#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../test_util.hpp"
#include "cdepth/gradcheck.hpp"
#include "cdepth/params.hpp"
#include "cdepth/text_prior.hpp"

namespace cdepth {
namespace {

using testing::random_tensor;

Vocabulary small_vocab() {
  Vocabulary v;
  v.add("a");
  v.add("chair");
  return v;
}

TEST(Tokenize, KnownWords) {
  EXPECT_EQ(tokenize("a chair", small_vocab()), (std::vector<TokenId>{2, 3}));
}

TEST(Tokenize, UnknownWordMapsToUnknown) {
  EXPECT_EQ(tokenize("a zebra", small_vocab()), (std::vector<TokenId>{2, Vocabulary::kUnknown}));
}

TEST(Tokenize, EmptyStringIsEmptyList) { EXPECT_TRUE(tokenize("", small_vocab()).empty()); }

TEST(Tokenize, NonAsciiRejected) { EXPECT_THROW(tokenize("a caf\xc3\xa9", small_vocab()), VocabularyError); }

TEST(Tokenize, LowercasesAndSplitsOnAnyWhitespace) {
  EXPECT_EQ(tokenize("  A\tCHAIR\n", small_vocab()), (std::vector<TokenId>{2, 3}));
}

TEST(Vocab, RejectsMissingMarkers) {
  EXPECT_THROW(Vocabulary({"a", "b"}), VocabularyError);
  EXPECT_THROW(Vocabulary({"<pad>", "<unk>", "a", "a"}), VocabularyError);
  EXPECT_THROW(small_vocab().token(40), VocabularyError);
}

TEST(Vocab, DetokenizeInvertsTokenize) {
  const auto v = small_vocab();
  EXPECT_EQ(detokenize(tokenize("a chair", v), v), "a chair");
}

TEST(Embed, SingleTokenIsItsRow) {
  FrozenEmbedder e(3, 10, 8);
  const Eigen::VectorXd f = e.embed({7});
  for (int k = 0; k < 8; ++k) EXPECT_EQ(f[k], e.table()(7, k));
}

TEST(Embed, PairIsMeanOfRows) {
  FrozenEmbedder e(3, 10, 8);
  const Eigen::VectorXd f = e.embed({2, 5});
  for (int k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(f[k], (e.table()(2, k) + e.table()(5, k)) / 2.0);
}

TEST(Embed, EmptyCaptionIsZero) {
  FrozenEmbedder e(3, 10, 8);
  EXPECT_TRUE(e.embed({}).isZero(0.0));
  EXPECT_EQ(e.embed({}).size(), 8);
}

TEST(Embed, OutOfRangeIdIsContractError) {
  FrozenEmbedder e(3, 10, 8);
  EXPECT_THROW(e.embed({10}), ContractError);
}

TEST(Embed, SameSeedSameTable) {
  FrozenEmbedder a(9, 12, 4), b(9, 12, 4), c(10, 12, 4);
  EXPECT_EQ(a.table(), b.table());
  EXPECT_NE(a.table(), c.table());
}

struct Head {
  Graph<double> g;
  TextHeadVars<double> psi;
  Var<double> feature;
};

void bind_head(Head& h, const ParameterSet<double>& params, const Tensor<double>& feature, bool trainable = false) {
  const auto bp = bind(h.g, params, Trainable{trainable, false, false});
  h.psi = {bp["text.fc1.w"], bp["text.fc1.b"], bp["text.fc2.w"], bp["text.fc2.b"], bp["text.fc3.w"], bp["text.fc3.b"]};
  h.feature = h.g.constant("feature", feature);
}

TEST(TextHead, ZeroNetworkGivesStandardNormal) {
  ModelConfig cfg;
  std::mt19937_64 rng(1);
  Head h;
  bind_head(h, zero_parameters<double>(cfg), random_tensor({3, cfg.text_dim}, rng));
  const auto dist = text_head(h.feature, h.psi);
  ASSERT_EQ(dist.mu.shape(), (Shape{3, cfg.latent_dim}));
  for (Index i = 0; i < dist.mu.value().size(); ++i) {
    EXPECT_EQ(dist.mu.value()[i], 0.0);
    EXPECT_EQ(dist.sigma.value()[i], 1.0);
  }
}

TEST(TextHead, Deterministic) {
  ModelConfig cfg;
  std::mt19937_64 rng(2);
  const auto params = init_parameters<double>(cfg, 4);
  const auto feature = random_tensor({2, cfg.text_dim}, rng);
  Head a, b;
  bind_head(a, params, feature);
  bind_head(b, params, feature);
  const auto da = text_head(a.feature, a.psi), db = text_head(b.feature, b.psi);
  EXPECT_TRUE(da.mu.value().bit_equal(db.mu.value()));
  EXPECT_TRUE(da.sigma.value().bit_equal(db.sigma.value()));
}

TEST(TextHead, LogSigmaIsClamped) {
  ModelConfig cfg;
  auto params = zero_parameters<double>(cfg);
  auto& b3 = params.at("text.fc3.b");
  for (int k = 0; k < cfg.latent_dim; ++k) {
    b3[cfg.latent_dim + k] = k % 2 == 0 ? 10.0 : -10.0;
  }
  Head h;
  bind_head(h, params, Tensor<double>::zeros({1, cfg.text_dim}));
  const auto dist = text_head(h.feature, h.psi);
  for (int k = 0; k < cfg.latent_dim; ++k) {
    EXPECT_EQ(dist.sigma.value()[k], k % 2 == 0 ? std::exp(3.0) : std::exp(-6.0));
  }
}

TEST(TextHead, SigmaStaysInBoundsForWildWeights) {
  ModelConfig cfg;
  std::mt19937_64 rng(8);
  auto params = init_parameters<double>(cfg, 1);
  for (auto& p : params.entries) p.value.data *= 50.0;
  Head h;
  bind_head(h, params, random_tensor({16, cfg.text_dim}, rng, -3, 3));
  const auto& s = text_head(h.feature, h.psi).sigma.value();
  EXPECT_GE(s.data.minCoeff(), std::exp(-6.0));
  EXPECT_LE(s.data.maxCoeff(), std::exp(3.0));
}

TEST(TextHead, GradientsMatchFiniteDifferences) {
  ModelConfig cfg;
  cfg.text_dim = 6;
  cfg.latent_dim = 3;
  cfg.text_hidden = {5, 4};
  std::mt19937_64 rng(21);
  Head h;
  bind_head(h, init_parameters<double>(cfg, 5), random_tensor({2, cfg.text_dim}, rng), true);
  const auto dist = text_head(h.feature, h.psi);
  Var<double> eps = h.g.constant("eps", random_tensor({2, cfg.latent_dim}, rng));
  const auto report = check_gradients(h.g, sum_all(square(reparameterize(dist, eps))), 1e-6);
  EXPECT_EQ(report.kink_crossings, 0);
  EXPECT_TRUE(report.pass) << report.max_rel_error();
}

struct Dist {
  Graph<double> g;
  LatentDistribution<double> dist;
};

void make_dist(Dist& d, const Tensor<double>& mu, const Tensor<double>& sigma) {
  d.dist.mu = d.g.leaf("mu", mu, true);
  d.dist.sigma = d.g.leaf("sigma", sigma, true);
  d.dist.log_sigma = log(d.dist.sigma);
}

TEST(Reparameterize, ZeroEpsGivesMu) {
  Dist d;
  make_dist(d, Tensor<double>({1, 2}, {0.3, -0.7}), Tensor<double>({1, 2}, {2.0, 0.1}));
  auto z = reparameterize(d.dist, d.g.constant("eps", Tensor<double>::zeros({1, 2})));
  EXPECT_TRUE(z.value().bit_equal(d.dist.mu.value()));
}

TEST(Reparameterize, HandArithmetic) {
  Dist d;
  make_dist(d, Tensor<double>({1, 2}, {1.0, 2.0}), Tensor<double>({1, 2}, {1.0, 0.5}));
  auto z = reparameterize(d.dist, d.g.constant("eps", Tensor<double>({1, 2}, {1.0, -2.0})));
  EXPECT_EQ(z.value()[0], 2.0);
  EXPECT_EQ(z.value()[1], 1.0);
}

TEST(Reparameterize, WidthMismatchIsContractError) {
  Dist d;
  make_dist(d, Tensor<double>({1, 2}, {1.0, 2.0}), Tensor<double>({1, 2}, {1.0, 0.5}));
  EXPECT_THROW(reparameterize(d.dist, d.g.constant("eps", Tensor<double>::zeros({1, 3}))), ContractError);
}

TEST(Reparameterize, GradientReachesMuAndSigmaNotEps) {
  Dist d;
  make_dist(d, Tensor<double>({1, 2}, {1.0, 2.0}), Tensor<double>({1, 2}, {1.0, 0.5}));
  Var<double> eps = d.g.constant("eps", Tensor<double>({1, 2}, {0.5, -3.0}));
  d.g.backward(sum_all(reparameterize(d.dist, eps)));
  EXPECT_EQ(d.g.grad(d.dist.mu)[1], 1.0);
  EXPECT_EQ(d.g.grad(d.dist.sigma)[1], -3.0);
  for (const auto& leaf : d.g.trainable_leaves()) EXPECT_NE(leaf.id, eps.id);
}

TEST(Reparameterize, MonteCarloMoments) {
  const Index n = 100000;
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal;
  Tensor<double> eps({n, 1});
  for (Index i = 0; i < n; ++i) eps[i] = normal(rng);
  Graph<double> g;
  LatentDistribution<double> dist;
  dist.mu = g.constant("mu", Tensor<double>::zeros({n, 1}));
  dist.sigma = g.constant("sigma", Tensor<double>::filled({n, 1}, 2.0));
  const auto& z = reparameterize(dist, g.constant("eps", eps)).value().data;
  const double mean = z.mean();
  const double sd = std::sqrt((z.array() - mean).square().mean());
  EXPECT_NEAR(mean, 0.0, 3.0 * 2.0 / std::sqrt(static_cast<double>(n)));
  EXPECT_GE(sd, 1.98);
  EXPECT_LE(sd, 2.02);
}

}  // namespace
}  // namespace cdepth
