#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "cdepth/params.hpp"

namespace cdepth {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments and update count for one parameter array.
template <typename Scalar>
struct AdamSlot {
  Tensor<Scalar> m;
  Tensor<Scalar> v;
  std::uint64_t t = 0;
};

/// One Adam step without weight decay:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
template <typename Scalar>
void adam_update(Tensor<Scalar>& param, AdamSlot<Scalar>& slot, const Tensor<Scalar>& grad, double lr,
                 const AdamHyper& hp = {}) {
  if (grad.shape != param.shape) throw ContractError("adam_update: gradient shape mismatch");
  if (slot.m.size() == 0) {
    slot.m = Tensor<Scalar>::zeros(param.shape);
    slot.v = Tensor<Scalar>::zeros(param.shape);
  }
  ++slot.t;
  const auto b1 = static_cast<Scalar>(hp.beta1);
  const auto b2 = static_cast<Scalar>(hp.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(hp.beta1, static_cast<double>(slot.t)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(hp.beta2, static_cast<double>(slot.t)));
  slot.m.data = b1 * slot.m.data + (Scalar(1) - b1) * grad.data;
  slot.v.data = b2 * slot.v.data + (Scalar(1) - b2) * grad.data.cwiseProduct(grad.data);
  param.data.array() -= static_cast<Scalar>(lr) * (slot.m.data.array() / c1) /
                        ((slot.v.data.array() / c2).sqrt() + static_cast<Scalar>(hp.eps));
}

/// Moments for every entry of a ParameterSet, index-aligned.
template <typename Scalar>
struct AdamState {
  std::vector<AdamSlot<Scalar>> slots;

  static AdamState for_params(const ParameterSet<Scalar>& params) {
    AdamState st;
    for (const auto& p : params.entries) st.slots.push_back({Tensor<Scalar>::zeros(p.value.shape), Tensor<Scalar>::zeros(p.value.shape), 0});
    return st;
  }
};

/// lr(s) = lr_end + (lr_start - lr_end) (1 + cos(pi s / S)) / 2.
inline double cosine_lr(std::uint64_t step, std::uint64_t total, double lr_start, double lr_end) {
  if (total == 0) return lr_start;
  const double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * frac));
}

enum class Branch : std::uint8_t { kText, kImage };

/// Text branch iff floor((s+1) p) > floor(s p): exactly floor(N p) text steps
/// in the first N, and never more than one away from N p in any window.
inline Branch schedule_select(std::uint64_t step, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("alternation ratio p must lie in [0, 1]");
  const double s = static_cast<double>(step);
  return std::floor((s + 1.0) * p) > std::floor(s * p) ? Branch::kText : Branch::kImage;
}

}  // namespace cdepth
