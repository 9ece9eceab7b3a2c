#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "upm/config.hpp"
#include "upm/report.hpp"

namespace upm {

/// Seed of the i-th generated scene.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t index);

/// Generates `count` scenes under out_dir (scene_NNNN/) and writes out_dir/manifest.tsv.
/// An out_dir that cannot be created raises ConfigError before anything is generated.
Manifest cmd_gen(const RunConfig& config, const std::filesystem::path& out_dir, std::size_t count,
                 std::uint64_t seed);

/// Trains on the manifest's train split (val split for model selection); writes
/// metrics.tsv, final.ckpt and best.ckpt into out_dir.
TrainResult cmd_pretrain(const RunConfig& config, const std::filesystem::path& manifest,
                         const std::filesystem::path& out_dir);

/// Runs config.eval.tasks on config.eval.split, writes the report files into out_dir and
/// prints a summary table to `out`.
EvalReport cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint,
                    const std::filesystem::path& manifest, const std::filesystem::path& out_dir, std::ostream& out);

struct InspectResult {
  std::vector<std::vector<double>> embeddings;  // V × d
  std::vector<double> similarity;               // V × V cosine, row-major
  std::vector<double> chamfer;                  // V × V
  /// Mean over anchors of the Spearman correlation between embedding similarity
  /// and negated Chamfer distance to the other views.
  double spearman = 0.0;
};

InspectResult inspect_scene(const TrainedModel& model, const Scene& scene, std::size_t chamfer_points = 512);
InspectResult cmd_inspect(const std::filesystem::path& checkpoint, const std::filesystem::path& scene_dir,
                          std::ostream& out);

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman_correlation(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace upm
