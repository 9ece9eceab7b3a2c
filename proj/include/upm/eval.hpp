#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "upm/data.hpp"
#include "upm/encoder.hpp"

namespace upm {

using Embedding = std::vector<double>;

/// The frozen encoder an evaluation runs against.
struct EvalEncoder {
  const EncoderParams* params = nullptr;
  EncoderConfig config;
  Modality modality = Modality::kFull;
};

struct GroundingInstance {
  std::string scene_id;
  std::size_t scene_index = 0;
  std::string referring_text;
  std::size_t target_object_id = 0;
  std::size_t gt_view = 0;                // largest visible area, lower index on ties
  std::vector<std::size_t> visible_set;  // ascending
};

struct RetrievalResult {
  std::map<std::size_t, double> recall_at;
  std::optional<double> visible_set_accuracy;
  std::size_t instances = 0;
};

/// One instance per object that at least one view sees with ≥ min_points pixels.
std::vector<GroundingInstance> make_grounding_instances(std::span<const Scene> scenes, std::size_t min_points);

/// Instances whose visible set is a single view, in input order.
std::vector<GroundingInstance> filter_unique(std::span<const GroundingInstance> instances);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Candidate indices by descending cosine similarity to `query`; ties go to the lower index.
std::vector<std::size_t> rank_by_cosine(std::span<const Embedding> candidates, std::span<const double> query);

/// Grounding metrics from precomputed embeddings: scene_views[s][v] and one query per instance.
RetrievalResult grounding_metrics(const std::vector<std::vector<Embedding>>& scene_views,
                                  std::span<const Embedding> queries, std::span<const GroundingInstance> instances,
                                  std::span<const std::size_t> ns = std::vector<std::size_t>{1, 5, 10});

/// Per-view embeddings for every scene (all views, or a max-coverage subset of max_views).
std::vector<std::vector<Embedding>> embed_scene_views(const EvalEncoder& encoder, std::span<const Scene> scenes,
                                                      std::size_t max_views = 0, double voxel_size = 0.25);
std::vector<Embedding> embed_texts(const EvalEncoder& encoder, const std::vector<std::string>& texts);
/// Normalized mean of view embeddings.
Embedding mean_pool(std::span<const Embedding> views);

RetrievalResult viewpoint_grounding(const EvalEncoder& encoder, std::span<const Scene> scenes,
                                    std::span<const GroundingInstance> instances,
                                    std::span<const std::size_t> ns = std::vector<std::size_t>{1, 5, 10});

struct RetrievalCaption {
  std::string text;
  std::size_t scene_index = 0;
};

/// Consecutive chunks of n referring texts joined by ". "; a scene with fewer than n
/// texts contributes one shorter caption, and a trailing partial chunk is dropped.
std::vector<RetrievalCaption> build_retrieval_captions(std::span<const Scene> scenes, std::size_t n);

RetrievalResult retrieval_metrics(std::span<const Embedding> scene_embeddings,
                                  std::span<const Embedding> caption_embeddings,
                                  std::span<const std::size_t> ground_truth,
                                  std::span<const std::size_t> ns = std::vector<std::size_t>{1, 5});

RetrievalResult scene_retrieval(const EvalEncoder& encoder, std::span<const Scene> scenes, std::size_t n,
                                std::size_t max_views = 0, double voxel_size = 0.25);

const std::vector<std::string>& default_prompt_templates();
/// "{}" replaced by the class name.
std::string instantiate_template(const std::string& templ, const std::string& class_name);

/// Argmax cosine over class embeddings; ties go to the lower class index.
std::size_t classify(std::span<const double> embedding, std::span<const Embedding> class_embeddings);
double classification_accuracy(std::span<const Embedding> embeddings, std::span<const Embedding> class_embeddings,
                               std::span<const std::size_t> labels);

/// Class index of each scene's scene_type; unknown types raise ContractError.
std::vector<std::size_t> scene_labels(std::span<const Scene> scenes, std::span<const std::string> class_names);

/// Zero-shot accuracy; several templates are ensembled by averaging normalized text embeddings.
double zero_shot_classify(const EvalEncoder& encoder, std::span<const Scene> scenes,
                          std::span<const std::string> class_names, std::span<const std::string> templates);

}  // namespace upm
