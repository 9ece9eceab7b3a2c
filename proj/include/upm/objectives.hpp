#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "upm/tensor.hpp"

namespace upm {

/// Mixing between the hard nearest-view target and the rank-decayed soft target.
struct GeoAlignConfig {
  double alpha = 0.7;
  double tau_r = 0.35;

  void validate() const;
};

/// Learnable contrastive temperature stored as log τ, so τ > 0 by construction.
class Temperature {
 public:
  static constexpr double kMin = 1e-3;
  static constexpr double kMax = 100.0;

  explicit Temperature(double tau = 0.07);

  /// exp(log τ) as a graph node.
  [[nodiscard]] Tensor tau() const;
  [[nodiscard]] double value() const;
  [[nodiscard]] const Tensor& log_tau() const { return log_tau_; }
  /// Projects τ back into [kMin, kMax].
  void clamp();
  /// Independent copy with the same log τ bits.
  [[nodiscard]] Temperature clone() const;
  static Temperature from_log(double log_tau);

 private:
  Tensor log_tau_;
};

/// Target distribution over one anchor's candidates; ranks must be a
/// permutation of 0..K−1. The hard target sits on the rank-0 candidate.
std::vector<double> soft_targets(std::span<const std::size_t> ranks, const GeoAlignConfig& config);

/// V×V row-major target matrix (zero diagonal) from a scene's Chamfer distance matrix.
std::vector<double> geo_targets(std::span<const double> chamfer, std::size_t view_count,
                                const GeoAlignConfig& config);

/// Contiguous rows of a batch tensor that belong to one scene.
struct SceneSlice {
  std::size_t offset = 0;
  std::size_t count = 0;
};

/// Cross-view geometric alignment: Σ over anchors of the soft-label cross-entropy
/// between targets and softmax over within-scene candidates of hᵥᵀhᵤ/τ.
/// Scenes with fewer than two views are skipped with a warning.
Tensor geo_loss(const Tensor& view_embeddings, std::span<const SceneSlice> scenes,
                std::span<const std::vector<double>> targets, const Tensor& tau);

struct GroundScene {
  SceneSlice views;
  SceneSlice objects;  // rows of the object-text tensor
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (view, object), scene-local
};

/// Grounded view alignment averaged over every positive pair of the batch.
/// Returns 0 (with a warning) when there are no positives.
Tensor ground_loss(const Tensor& view_embeddings, const Tensor& object_texts,
                   std::span<const GroundScene> scenes, const Tensor& tau);

/// Symmetric InfoNCE over index-aligned rows of `a` and `b` with logits aᵢᵀbⱼ/τ.
Tensor symmetric_info_nce(const Tensor& a, const Tensor& b, const Tensor& tau);
/// View ↔ view-caption alignment across the batch.
Tensor view_loss(const Tensor& view_embeddings, const Tensor& view_captions, const Tensor& tau);
/// Pooled scene ↔ scene-caption alignment across the batch.
Tensor scene_loss(const Tensor& scene_embeddings, const Tensor& scene_captions, const Tensor& tau);

struct LossBreakdown {
  double l_geo = 0.0;
  double l_ground = 0.0;
  double l_view = 0.0;
  double l_scene = 0.0;
  double total = 0.0;
  double lambda = 0.1;
};

struct LossTerms {
  Tensor geo, ground, view, scene;
};

struct TotalLoss {
  Tensor total;
  LossBreakdown breakdown;
};

/// λ·geo + ground + view + scene, evaluated left to right.
TotalLoss total_loss(const LossTerms& terms, double lambda);
/// Same arithmetic on plain numbers (used to re-check logged rows).
double combine_terms(double l_geo, double l_ground, double l_view, double l_scene, double lambda);

}  // namespace upm
