#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "upm/data.hpp"
#include "upm/encoder.hpp"
#include "upm/objectives.hpp"

namespace upm {

// --- Optimization ------------------------------------------------------------

struct Parameter {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t step = 0;
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double weight_decay = 0.05;
  double eps = 1e-8;
};

/// Linear warmup over the first warmup_fraction·total_steps steps, cosine decay to zero after.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction);

/// One decoupled-weight-decay Adam update from each parameter's accumulated gradient
/// (a parameter without a gradient is treated as g = 0). Throws NumericError naming
/// the first parameter whose gradient is not finite; nothing is updated in that case.
void adamw_step(std::span<const Parameter> params, OptimizerState& state, double lr, const AdamWConfig& config);

/// Scales all gradients so their global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(std::span<const Parameter> params, double max_norm);

// --- Training ----------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t scenes_per_batch = 4;
  std::size_t views_per_scene = 8;
  double learning_rate = 3e-4;
  AdamWConfig adamw;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  double loss_lambda = 0.1;
  GeoAlignConfig geo;
  double init_temperature = 0.07;
  bool per_loss_temperature = false;
  bool use_geo = true, use_ground = true, use_view = true, use_scene = true;
  Modality modality = Modality::kFull;
  bool freeze_text = false;
  double grad_clip = 1.0;  // <= 0 disables clipping
  double voxel_size = 0.25;
  std::size_t min_points = 16;
  std::size_t chamfer_points = 512;

  static TrainConfig desk() { return {}; }
  /// Full-scale recipe: batch 64, 32 views, 80 epochs, lr 1e-4.
  static TrainConfig paper();
  void validate() const;
};

struct StepMetrics {
  std::size_t step = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double tau = 0.0;
};

/// Encoder weights plus the learned temperature(s).
struct TrainedModel {
  EncoderConfig config;
  EncoderParams params;
  std::vector<Temperature> temperatures;  // one shared, or geo/ground/view/scene
  Modality modality = Modality::kFull;
};

struct TrainResult {
  TrainedModel final_model;
  TrainedModel best_model;
  std::vector<StepMetrics> steps;
  std::vector<double> epoch_val_loss;
  std::size_t best_epoch = 0;
};

/// Where train() writes its artifacts; empty paths are skipped.
struct TrainOutputs {
  std::filesystem::path metrics_log;
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;

  static TrainOutputs in(const std::filesystem::path& dir);
};

TrainResult train(std::span<const Scene> train_scenes, std::span<const Scene> val_scenes, const TrainConfig& config,
                  const EncoderConfig& encoder_config, const TrainOutputs& outputs = {});
TrainResult train(const Manifest& manifest, const TrainConfig& config, const EncoderConfig& encoder_config,
                  const std::filesystem::path& out_dir);

/// Average total loss over `scenes` in batches, without gradients.
double evaluate_loss(const TrainedModel& model, std::span<const Scene> scenes, const TrainConfig& config);

Checkpoint make_checkpoint(const TrainedModel& model, const TrainConfig& config, std::size_t steps);
TrainedModel model_from_checkpoint(const Checkpoint& checkpoint);

/// Reads the metrics log back (header line skipped).
std::vector<StepMetrics> read_metrics_log(const std::filesystem::path& path);

}  // namespace upm
