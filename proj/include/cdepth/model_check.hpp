#pragma once

// Finite-difference checks of the two full training objectives at toy size.

#include <cstdint>
#include <string>

#include "cdepth/gradcheck.hpp"
#include "cdepth/objectives.hpp"
#include "cdepth/params.hpp"

namespace cdepth {

/// 16x16 single-channel images, two-wide layers everywhere.
ModelConfig toy_model_config();

struct ObjectiveCheck {
  std::string objective;  // "vae" or "cs"
  std::uint64_t seed = 0;
  GradReport report;
  /// Text-head gradient when the only route from the text head into the loss
  /// runs through the sampler's detached inputs; must be exactly zero.
  bool detach_exact_zero = true;
  bool pass() const { return report.pass && detach_exact_zero; }
};

/// Text-branch objective; text head and decoder are the checked leaves.
ObjectiveCheck check_vae_objective(std::uint64_t seed, double h = 1e-6, const LossConfig& loss = {});

/// Image-branch objective with every parameter group as a checked leaf.
ObjectiveCheck check_cs_objective(std::uint64_t seed, double h = 1e-6, const LossConfig& loss = {});

}  // namespace cdepth
