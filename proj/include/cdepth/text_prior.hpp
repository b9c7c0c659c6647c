#pragma once

// Caption side of the model: vocabulary, the frozen caption embedder, the
// text head producing (mu, sigma), and reparameterized sampling.

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cdepth/graph.hpp"

namespace cdepth {

using TokenId = std::uint16_t;

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnknown = 1;

  Vocabulary();
  /// Full listing in id order; entries 0 and 1 must be the pad/unknown markers.
  explicit Vocabulary(std::vector<std::string> tokens);

  /// Appends a word if absent and returns its id.
  TokenId add(const std::string& word);
  /// Id of a word, or kUnknown.
  TokenId lookup(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Lowercases and splits on whitespace; unseen words map to kUnknown.
std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);

std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab);

/// Fixed random-projection caption encoder: one Gaussian row per token id,
/// mean-pooled. Never trained.
class FrozenEmbedder {
 public:
  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  FrozenEmbedder(std::uint64_t seed, std::size_t vocab_size, int width);

  /// Mean of the rows for `ids`; the zero vector for an empty caption.
  Eigen::VectorXd embed(const std::vector<TokenId>& ids) const;

  int width() const { return static_cast<int>(table_.cols()); }
  std::size_t vocab_size() const { return static_cast<std::size_t>(table_.rows()); }
  std::uint64_t seed() const { return seed_; }
  const Matrix& table() const { return table_; }

 private:
  std::uint64_t seed_;
  Matrix table_;
};

/// Posterior parameters predicted from a caption. All three are [N, d].
template <typename Scalar>
struct LatentDistribution {
  Var<Scalar> mu;
  Var<Scalar> sigma;
  Var<Scalar> log_sigma;  // clamped pre-activation
};

inline constexpr double kLogSigmaMin = -6.0;
inline constexpr double kLogSigmaMax = 3.0;

/// Weights of the three affine layers of the text head.
template <typename Scalar>
struct TextHeadVars {
  Var<Scalar> w1, b1, w2, b2, w3, b3;
};

/// feature [N, D_t] -> (mu, sigma), through affine-relu-affine-relu-affine to
/// 2d outputs. The first d outputs are mu, the rest log sigma clamped to
/// [-6, 3].
template <typename Scalar>
LatentDistribution<Scalar> text_head(Var<Scalar> feature, const TextHeadVars<Scalar>& psi) {
  Var<Scalar> h = relu(affine(feature, psi.w1, psi.b1));
  h = relu(affine(h, psi.w2, psi.b2));
  Var<Scalar> out = affine(h, psi.w3, psi.b3);
  const Index width = out.shape()[1];
  if (width % 2 != 0) throw ContractError("text_head: output width must be 2d, got " + std::to_string(width));
  const Index d = width / 2;
  LatentDistribution<Scalar> dist;
  dist.mu = slice_last(out, 0, d);
  dist.log_sigma = clamp(slice_last(out, d, width), kLogSigmaMin, kLogSigmaMax);
  dist.sigma = exp(dist.log_sigma);
  return dist;
}

/// z = mu + eps * sigma. eps enters as a non-trainable input.
template <typename Scalar>
Var<Scalar> reparameterize(const LatentDistribution<Scalar>& dist, Var<Scalar> eps) {
  if (eps.shape() != dist.mu.shape()) {
    throw ContractError("reparameterize: eps shape " + to_string(eps.shape()) + " does not match mu " +
                        to_string(dist.mu.shape()));
  }
  return dist.mu + eps * dist.sigma;
}

}  // namespace cdepth
