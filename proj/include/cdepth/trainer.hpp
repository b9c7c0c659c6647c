#pragma once

// Alternating optimization of the caption branch (text head + decoder) and the
// image branch (conditional sampler + decoder), inference in both modes,
// checkpoints and the two scripted experiments.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cdepth/objectives.hpp"
#include "cdepth/optimizer.hpp"
#include "cdepth/params.hpp"
#include "cdepth/scene.hpp"
#include "cdepth/text_prior.hpp"

namespace cdepth {

struct TrainConfig {
  double p = 0.01;
  int batch = 16;
  int epochs = 30;
  double lr_start = 3e-3;
  double lr_end = 1e-3;
  LossConfig loss;
  ModelConfig model;
  std::uint64_t seed = 0;
  std::uint64_t embedder_seed = 20240;
  std::string train_path;
  std::string val_path;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
/// Overrides the fields present in `j` on top of `base`; unknown keys are errors.
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

nlohmann::json to_json(const MetricsReport& r);

struct TrainState {
  ParameterSet<float> params;
  AdamState<float> adam;
  std::uint64_t step = 0;
};

/// Everything needed to resume training or run inference.
struct Checkpoint {
  TrainConfig config;
  Vocabulary vocab;
  TrainState state;
};

inline constexpr char kCheckpointMagic[4] = {'W', 'D', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint initial_checkpoint(const TrainConfig& cfg, const Vocabulary& vocab);

/// One minibatch in graph-ready layout.
struct Batch {
  Tensor<float> images;    // [b, C, H, W]
  DepthTarget<float> target;  // [b, 1, H, W]
  Tensor<float> features;  // [b, D_t]
};

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, const FrozenEmbedder& embedder);

struct StepResult {
  Branch branch = Branch::kImage;
  double loss = 0.0;
  double grad_norm_text = 0.0;
  double grad_norm_sampler = 0.0;
  double grad_norm_decoder = 0.0;
  bool rolled_back = false;
};

/// Caption branch: eps ~ N(0, 1) seeded by (seed, step); zero skips; updates
/// the text head and decoder only.
StepResult train_step_text(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr);

/// Image branch: frozen text head, eps grid from the sampler, real skips;
/// updates the sampler and decoder only.
StepResult train_step_image(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr);

/// Picks the branch with schedule_select(state.step, cfg.p) and advances the step.
StepResult train_step(TrainState& state, const Batch& batch, const TrainConfig& cfg, double lr);

/// Frozen parameters plus the caption embedder, for inference.
class Predictor {
 public:
  explicit Predictor(const Checkpoint& ckpt);
  Predictor(ModelConfig cfg, ParameterSet<float> params, FrozenEmbedder embedder, Vocabulary vocab);

  /// Image-branch inference: text head -> sampler -> combine -> decode with skips.
  /// images: [n, C, H, W]. Returns [n, 1, H, W].
  Tensor<float> infer_image(const Tensor<float>& images, const std::vector<std::vector<TokenId>>& captions) const;
  Eigen::ArrayXf infer_image(const Eigen::ArrayXf& image, const std::vector<TokenId>& caption) const;

  struct TextSamples {
    std::vector<Eigen::ArrayXf> depths;  // each H*W
    Eigen::VectorXf mu;
    Eigen::VectorXf sigma;
  };
  /// Generative mode: n draws eps ~ N(0, 1) seeded by `seed`, tiled, decoded with zero skips.
  TextSamples infer_text(const std::vector<TokenId>& caption, int n, std::uint64_t seed) const;
  /// Same, with caller-supplied eps rows ([n, d]).
  TextSamples infer_text_with(const std::vector<TokenId>& caption, const Tensor<float>& eps) const;

  const ModelConfig& config() const { return cfg_; }
  const Vocabulary& vocab() const { return vocab_; }
  const FrozenEmbedder& embedder() const { return embedder_; }
  const ParameterSet<float>& params() const { return params_; }

 private:
  Tensor<float> features(const std::vector<std::vector<TokenId>>& captions) const;

  ModelConfig cfg_;
  ParameterSet<float> params_;
  FrozenEmbedder embedder_;
  Vocabulary vocab_;
};

/// Per-image metrics averaged over the dataset. If `on_error_map` is set it
/// receives (sample index, |y*-y|/y* map) for every sample.
MetricsReport evaluate_dataset(const Predictor& model, const Dataset& data,
                               const std::function<void(std::size_t, const Eigen::ArrayXd&)>& on_error_map = {});

struct FitResult {
  Checkpoint best;     // lowest validation AbsRel
  Checkpoint last;
  int best_epoch = -1;
  MetricsReport best_val;
  std::vector<nlohmann::json> epoch_log;
  std::uint64_t text_steps = 0;
  std::uint64_t image_steps = 0;
  std::uint64_t rolled_back_steps = 0;
  /// Batches whose caption features were not all zero.
  std::uint64_t nonzero_text_features = 0;
};

/// Hooks for instrumentation; called after every optimizer step.
using StepObserver = std::function<void(const TrainState& before, const TrainState& after, const StepResult&)>;

FitResult fit(const TrainConfig& cfg, const Dataset& train, const Dataset& val, std::ostream* log = nullptr,
              const StepObserver& observer = {});

struct SweepRow {
  double p;
  MetricsReport test;
  MetricsReport best_val;
  Checkpoint best;
};

/// One fit per p with shared seed and data; rows in the order given.
std::vector<SweepRow> run_ratio_sweep(const TrainConfig& cfg, const std::vector<double>& p_list, const Dataset& train,
                                      const Dataset& val, const Dataset& test, std::ostream* log = nullptr);

struct AblationResult {
  MetricsReport with_caption;
  MetricsReport empty_caption;
  std::uint64_t ablated_nonzero_features = 0;
  FitResult with_fit;
};

/// Copy of a dataset with every caption emptied.
Dataset strip_captions(const Dataset& data);

/// `with_caption`, if given, must be fit(cfg, train, val) and is reused instead of refitting.
AblationResult run_caption_ablation(const TrainConfig& cfg, const Dataset& train, const Dataset& val,
                                    const Dataset& test, std::ostream* log = nullptr,
                                    const FitResult* with_caption = nullptr);

}  // namespace cdepth
