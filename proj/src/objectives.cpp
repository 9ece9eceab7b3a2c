#include "upm/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "upm/error.hpp"
#include "upm/geometry.hpp"
#include "upm/log.hpp"
#include "upm/ops.hpp"

namespace upm {

void GeoAlignConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(tau_r > 0.0)) throw ConfigError("tau_r must be > 0");
}

Temperature::Temperature(double tau) {
  if (!(tau >= kMin && tau <= kMax)) throw ConfigError("temperature must lie in [1e-3, 100]");
  log_tau_ = Tensor::scalar(std::log(tau), true);
}

Tensor Temperature::tau() const { return exp(log_tau_); }

double Temperature::value() const { return std::exp(log_tau_.item()); }

void Temperature::clamp() {
  auto v = log_tau_.mutable_data();
  v[0] = std::clamp(v[0], std::log(kMin), std::log(kMax));
}

Temperature Temperature::clone() const { return from_log(log_tau_.item()); }

Temperature Temperature::from_log(double log_tau) {
  Temperature t;
  t.log_tau_.mutable_data()[0] = log_tau;
  t.clamp();
  return t;
}

std::vector<double> soft_targets(std::span<const std::size_t> ranks, const GeoAlignConfig& config) {
  config.validate();
  const std::size_t k = ranks.size();
  if (k == 0) throw DegenerateInputError("soft_targets: empty candidate set");
  std::vector<bool> seen(k, false);
  for (const auto r : ranks) {
    if (r >= k || seen[r]) throw ContractError("soft_targets: ranks must be a permutation of 0..K-1");
    seen[r] = true;
  }
  // Rank 0 has the largest weight, so exp(0)=1 is the stabilizing maximum.
  std::vector<double> soft(k);
  double z = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    soft[i] = std::exp(-static_cast<double>(ranks[i]) / config.tau_r);
    z += soft[i];
  }
  std::vector<double> p(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double hard = ranks[i] == 0 ? 1.0 : 0.0;
    p[i] = config.alpha * hard + (1.0 - config.alpha) * (soft[i] / z);
  }
  return p;
}

std::vector<double> geo_targets(std::span<const double> chamfer, std::size_t view_count,
                                const GeoAlignConfig& config) {
  std::vector<double> out(view_count * view_count, 0.0);
  if (view_count < 2) return out;
  for (std::size_t v = 0; v < view_count; ++v) {
    const ProximityRanks pr = proximity_ranks(chamfer, view_count, v);
    const auto p = soft_targets(pr.ranks, config);
    for (std::size_t i = 0; i < pr.candidates.size(); ++i) out[v * view_count + pr.candidates[i]] = p[i];
  }
  return out;
}

namespace {

Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? add(acc, term) : term; }

}  // namespace

Tensor geo_loss(const Tensor& view_embeddings, std::span<const SceneSlice> scenes,
                std::span<const std::vector<double>> targets, const Tensor& tau) {
  if (targets.size() != scenes.size()) throw ContractError("geo_loss: one target matrix per scene required");
  Tensor total;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto [offset, count] = scenes[s];
    if (count < 2) {
      log::warning("geo_loss: scene " + std::to_string(s) + " has fewer than two views; skipped");
      continue;
    }
    if (targets[s].size() != count * count) throw ShapeError("geo_loss: target matrix size mismatch");
    const Tensor h = slice_rows(view_embeddings, offset, count);
    const Tensor logits = div_scalar(matmul_nt(h, h), tau);
    std::vector<unsigned char> mask(count * count, 1);
    for (std::size_t v = 0; v < count; ++v) mask[v * count + v] = 0;
    total = accumulate(total, soft_cross_entropy(logits, targets[s], mask));
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

Tensor ground_loss(const Tensor& view_embeddings, const Tensor& object_texts,
                   std::span<const GroundScene> scenes, const Tensor& tau) {
  Tensor total;
  std::size_t positives = 0;
  for (const auto& sc : scenes) {
    if (sc.pairs.empty()) continue;
    for (const auto& [v, o] : sc.pairs) {
      if (v >= sc.views.count || o >= sc.objects.count) {
        throw ContractError("ground_loss: pair (" + std::to_string(v) + "," + std::to_string(o) +
                            ") indexes outside the scene");
      }
    }
    const Tensor h = slice_rows(view_embeddings, sc.views.offset, sc.views.count);
    const Tensor t = slice_rows(object_texts, sc.objects.offset, sc.objects.count);
    total = accumulate(total, pair_cross_entropy(div_scalar(matmul_nt(h, t), tau), sc.pairs));
    positives += sc.pairs.size();
  }
  if (positives == 0) {
    log::warning("ground_loss: no visible view-object pairs in batch; term is zero");
    return Tensor::scalar(0.0);
  }
  return scale(total, 1.0 / (2.0 * static_cast<double>(positives)));
}

Tensor symmetric_info_nce(const Tensor& a, const Tensor& b, const Tensor& tau) {
  if (!a.defined() || !b.defined()) throw DegenerateInputError("InfoNCE needs at least one pair");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1)) {
    throw ShapeError("InfoNCE: embeddings must be index-aligned with equal width");
  }
  const std::size_t n = a.dim(0);
  std::vector<std::pair<std::size_t, std::size_t>> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = {i, i};
  return scale(pair_cross_entropy(div_scalar(matmul_nt(a, b), tau), diag), 1.0 / (2.0 * static_cast<double>(n)));
}

Tensor view_loss(const Tensor& view_embeddings, const Tensor& view_captions, const Tensor& tau) {
  return symmetric_info_nce(view_embeddings, view_captions, tau);
}

Tensor scene_loss(const Tensor& scene_embeddings, const Tensor& scene_captions, const Tensor& tau) {
  return symmetric_info_nce(scene_embeddings, scene_captions, tau);
}

double combine_terms(double l_geo, double l_ground, double l_view, double l_scene, double lambda) {
  return lambda * l_geo + l_ground + l_view + l_scene;
}

TotalLoss total_loss(const LossTerms& terms, double lambda) {
  const auto value_or_zero = [](const Tensor& t) { return t.defined() ? t : Tensor::scalar(0.0); };
  const Tensor geo = value_or_zero(terms.geo), ground = value_or_zero(terms.ground);
  const Tensor view = value_or_zero(terms.view), scene = value_or_zero(terms.scene);
  Tensor total = add(add(add(scale(geo, lambda), ground), view), scene);
  TotalLoss out;
  out.breakdown = {geo.item(), ground.item(), view.item(), scene.item(), total.item(), lambda};
  out.total = std::move(total);
  return out;
}

}  // namespace upm
