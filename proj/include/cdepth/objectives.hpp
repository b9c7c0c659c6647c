#pragma once

// Training losses (graph form) and evaluation metrics (plain arrays).

#include <Eigen/Core>

#include <cmath>
#include <string>

#include "cdepth/graph.hpp"

namespace cdepth {

struct LossConfig {
  double gamma = 0.85;      // scale-invariant loss sensitivity
  double alpha = 1e-3;      // KL weight, text branch
  double beta = 1e-3;       // KL weight, image branch
  double sigma_floor = 1e-6;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("alpha and beta must be non-negative");
    if (!(sigma_floor > 0.0)) throw ConfigError("sigma floor must be positive");
  }
};

/// Ground truth and validity mask for a batch, both [N, 1, H, W]. Mask holds
/// 0/1. Depth values at masked-out pixels are ignored.
template <typename Scalar>
struct DepthTarget {
  Tensor<Scalar> depth;
  Tensor<Scalar> mask;
};

namespace detail {

template <typename Scalar>
void check_positive_under_mask(const Tensor<Scalar>& values, const Tensor<Scalar>& mask, const char* what) {
  for (Index i = 0; i < values.size(); ++i) {
    if (mask[i] != Scalar(0) && !(values[i] > Scalar(0))) {
      throw ContractError(std::string(what) + ": non-positive depth " + std::to_string(values[i]) +
                          " under mask at index " + std::to_string(i));
    }
  }
}

}  // namespace detail

/// Batch mean of (1/Ne) sum e^2 - (gamma/Ne^2) (sum e)^2 with
/// e = ln y - ln y* over each image's valid pixels.
template <typename Scalar>
Var<Scalar> si_loss(Var<Scalar> y, const DepthTarget<Scalar>& target, double gamma) {
  Graph<Scalar>& g = *y.graph;
  const Shape s = y.shape();
  if (s.size() != 4 || s[1] != 1 || target.depth.shape != s || target.mask.shape != s) {
    throw ContractError("si_loss: prediction " + to_string(s) + ", target " + to_string(target.depth.shape) +
                        ", mask " + to_string(target.mask.shape) + " must all be [N,1,H,W]");
  }
  detail::check_positive_under_mask(y.value(), target.mask, "si_loss prediction");
  detail::check_positive_under_mask(target.depth, target.mask, "si_loss target");
  const Index n = s[0];
  const Index plane = s[2] * s[3];
  Tensor<Scalar> safe_target(s), inv_count({n, 1, 1, 1}), unmasked(s);
  for (Index b = 0; b < n; ++b) {
    Index count = 0;
    for (Index p = 0; p < plane; ++p) {
      const Index i = b * plane + p;
      const bool valid = target.mask[i] != Scalar(0);
      count += valid;
      safe_target[i] = valid ? target.depth[i] : Scalar(1);
      unmasked[i] = valid ? Scalar(0) : Scalar(1);
    }
    if (count == 0) throw ContractError("si_loss: image " + std::to_string(b) + " has no valid pixels");
    inv_count[b] = Scalar(1) / static_cast<Scalar>(count);
  }
  Var<Scalar> mask = g.constant("si.mask", target.mask);
  // Masked-out pixels are replaced by 1 before the log so their values never matter.
  Var<Scalar> safe = y * mask + g.constant("si.unmasked", std::move(unmasked));
  Var<Scalar> e = (log(safe) - log(g.constant("si.target", std::move(safe_target)))) * mask;
  // Centered form of mean(e^2) - gamma mean(e)^2; avoids cancellation when |mean(e)| is large.
  Var<Scalar> inv = g.constant("si.inv_count", std::move(inv_count));
  Var<Scalar> m = sum(e, {1, 2, 3}) * inv;
  Var<Scalar> centered = (e - expand(m, s)) * mask;
  Var<Scalar> var = sum(square(centered), {1, 2, 3}) * inv;
  Var<Scalar> per_image = var + square(m) * (1.0 - gamma);
  return mean_all(per_image);
}

/// Mean over all elements of -ln(sigma) + (sigma^2 + mu^2)/2 - 1/2.
template <typename Scalar>
Var<Scalar> kl_loss(Var<Scalar> mu, Var<Scalar> sigma) {
  if (mu.shape() != sigma.shape()) throw ContractError("kl_loss: mu and sigma shapes differ");
  const auto& sv = sigma.value();
  for (Index i = 0; i < sv.size(); ++i) {
    if (!(sv[i] > Scalar(0))) throw ContractError("kl_loss: sigma must be positive, got " + std::to_string(sv[i]));
  }
  Var<Scalar> per = (square(sigma) + square(mu)) * 0.5 - log(sigma) - 0.5;
  return mean_all(per);
}

/// KL of a (mu, log sigma) pair, reusing the clamped pre-activation instead of
/// taking the log of exp.
template <typename Scalar>
Var<Scalar> kl_loss_log(Var<Scalar> mu, Var<Scalar> sigma, Var<Scalar> log_sigma) {
  Var<Scalar> per = (square(sigma) + square(mu)) * 0.5 - log_sigma - 0.5;
  return mean_all(per);
}

template <typename Scalar>
struct BatchStats {
  Var<Scalar> mean;  // [1, d, 1, 1]
  Var<Scalar> std;   // [1, d, 1, 1], >= floor
};

/// Per latent dimension, mean and population std over all b*h*w cells of
/// eps [b, d, h, w]; std floored.
template <typename Scalar>
BatchStats<Scalar> batch_eps_stats(Var<Scalar> eps, double floor) {
  const Shape s = eps.shape();
  if (s.size() != 4) throw ContractError("batch_eps_stats: eps must be [b,d,h,w], got " + to_string(s));
  if (s[0] * s[2] * s[3] < 2) throw ContractError("batch_eps_stats: need at least 2 cells per dimension");
  BatchStats<Scalar> st;
  st.mean = mean(eps, {0, 2, 3});
  Var<Scalar> centered = eps - expand(st.mean, s);
  st.std = max_scalar(sqrt(mean(square(centered), {0, 2, 3})), floor);
  return st;
}

/// L_SI(y*, y_hat) + alpha * KL(mu_hat, sigma_hat).
template <typename Scalar>
Var<Scalar> vae_objective(Var<Scalar> y_hat, const DepthTarget<Scalar>& target, Var<Scalar> mu, Var<Scalar> sigma,
                          const LossConfig& cfg) {
  Var<Scalar> loss = si_loss(y_hat, target, cfg.gamma);
  if (cfg.alpha == 0.0) return loss;
  return loss + kl_loss(mu, sigma) * cfg.alpha;
}

/// L_SI(y*, y_tilde) + beta * KL(batch mean, batch std of eps).
template <typename Scalar>
Var<Scalar> cs_objective(Var<Scalar> y_tilde, const DepthTarget<Scalar>& target, Var<Scalar> eps,
                         const LossConfig& cfg) {
  Var<Scalar> loss = si_loss(y_tilde, target, cfg.gamma);
  if (cfg.beta == 0.0) return loss;
  const BatchStats<Scalar> st = batch_eps_stats(eps, cfg.sigma_floor);
  return loss + kl_loss(st.mean, st.std) * cfg.beta;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  double abs_rel = 0.0;
  double rmse = 0.0;
  double log10 = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  Index pixels = 0;
};

/// Metrics for one depth map over pixels with mask != 0.
MetricsReport compute_metrics(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                              const Eigen::Array<bool, Eigen::Dynamic, 1>& mask);

/// Per-pixel |y* - y| / y*, zero where masked out.
Eigen::ArrayXd error_map(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                         const Eigen::Array<bool, Eigen::Dynamic, 1>& mask);

/// Dataset-level report: mean of per-image metrics; `pixels` sums.
class MetricsAccumulator {
 public:
  void add(const MetricsReport& r);
  MetricsReport mean() const;
  Index images() const { return images_; }

 private:
  MetricsReport sum_;
  Index images_ = 0;
};

}  // namespace cdepth
