#include "cdepth/objectives.hpp"

#include <cmath>

namespace cdepth {
namespace {

void check_inputs(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                  const Eigen::Array<bool, Eigen::Dynamic, 1>& mask, const char* what) {
  if (pred.size() != truth.size() || pred.size() != mask.size()) {
    throw ContractError(std::string(what) + ": prediction, truth and mask sizes differ");
  }
  for (Index i = 0; i < pred.size(); ++i) {
    if (mask[i] && !(pred[i] > 0.0 && truth[i] > 0.0)) {
      throw ContractError(std::string(what) + ": non-positive depth under mask at pixel " + std::to_string(i));
    }
  }
}

}  // namespace

MetricsReport compute_metrics(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                              const Eigen::Array<bool, Eigen::Dynamic, 1>& mask) {
  check_inputs(pred, truth, mask, "compute_metrics");
  const Index n = mask.count();
  if (n == 0) throw ContractError("compute_metrics: no valid pixels");
  const Eigen::ArrayXd m = mask.cast<double>();
  const Eigen::ArrayXd y = mask.select(pred, 1.0);
  const Eigen::ArrayXd t = mask.select(truth, 1.0);
  const Eigen::ArrayXd ratio = (y / t).max(t / y);
  const double inv = 1.0 / static_cast<double>(n);

  MetricsReport r;
  r.pixels = n;
  r.abs_rel = ((y - t).abs() / t * m).sum() * inv;
  r.rmse = std::sqrt(((y - t).square() * m).sum() * inv);
  r.log10 = ((y.log10() - t.log10()).abs() * m).sum() * inv;
  r.rmse_log = std::sqrt(((y.log() - t.log()).square() * m).sum() * inv);
  const double nd = static_cast<double>(n);
  r.delta1 = static_cast<double>((mask && (ratio < 1.25)).count()) / nd;
  r.delta2 = static_cast<double>((mask && (ratio < 1.25 * 1.25)).count()) / nd;
  r.delta3 = static_cast<double>((mask && (ratio < 1.25 * 1.25 * 1.25)).count()) / nd;
  return r;
}

Eigen::ArrayXd error_map(const Eigen::ArrayXd& pred, const Eigen::ArrayXd& truth,
                         const Eigen::Array<bool, Eigen::Dynamic, 1>& mask) {
  check_inputs(pred, truth, mask, "error_map");
  const Eigen::ArrayXd t = mask.select(truth, 1.0);
  return mask.select((truth - pred).abs() / t, 0.0);
}

void MetricsAccumulator::add(const MetricsReport& r) {
  sum_.abs_rel += r.abs_rel;
  sum_.rmse += r.rmse;
  sum_.log10 += r.log10;
  sum_.rmse_log += r.rmse_log;
  sum_.delta1 += r.delta1;
  sum_.delta2 += r.delta2;
  sum_.delta3 += r.delta3;
  sum_.pixels += r.pixels;
  ++images_;
}

MetricsReport MetricsAccumulator::mean() const {
  if (images_ == 0) throw ContractError("metrics: no images accumulated");
  const double inv = 1.0 / static_cast<double>(images_);
  MetricsReport r = sum_;
  r.abs_rel *= inv;
  r.rmse *= inv;
  r.log10 *= inv;
  r.rmse_log *= inv;
  r.delta1 *= inv;
  r.delta2 *= inv;
  r.delta3 *= inv;
  return r;
}

}  // namespace cdepth
