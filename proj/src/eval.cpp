#include "upm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "upm/error.hpp"
#include "upm/log.hpp"
#include "upm/parallel.hpp"

namespace upm {

std::vector<GroundingInstance> make_grounding_instances(std::span<const Scene> scenes, std::size_t min_points) {
  if (min_points < 1) throw ContractError("make_grounding_instances: min_points must be >= 1");
  std::vector<GroundingInstance> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto pms = scenes[s].pointmaps();
    for (const auto& obj : scenes[s].objects) {
      GroundingInstance inst;
      inst.scene_id = scenes[s].scene_id;
      inst.scene_index = s;
      inst.referring_text = obj.referring_text;
      inst.target_object_id = obj.object_id;
      std::size_t best = 0;
      for (std::size_t v = 0; v < pms.size(); ++v) {
        const std::size_t area = visible_area(pms[v], obj);
        if (area >= min_points) inst.visible_set.push_back(v);
        if (area > best) {
          best = area;
          inst.gt_view = v;
        }
      }
      if (inst.visible_set.empty()) {
        log::warning("scene " + inst.scene_id + ": object " + std::to_string(obj.object_id) +
                     " is not visible in any view; no grounding instance");
        continue;
      }
      out.push_back(std::move(inst));
    }
  }
  return out;
}

std::vector<GroundingInstance> filter_unique(std::span<const GroundingInstance> instances) {
  std::vector<GroundingInstance> out;
  for (const auto& i : instances) {
    if (i.visible_set.size() == 1) out.push_back(i);
  }
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) throw DegenerateInputError("cosine_similarity: zero vector");
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

std::vector<std::size_t> rank_by_cosine(std::span<const Embedding> candidates, std::span<const double> query) {
  std::vector<double> sim(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) sim[i] = cosine_similarity(candidates[i], query);
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  return order;
}

namespace {

void check_ns(std::span<const std::size_t> ns) {
  if (ns.empty()) throw ContractError("recall cutoffs must not be empty");
  for (const auto n : ns) {
    if (n < 1) throw ContractError("recall cutoffs must be >= 1");
  }
}

}  // namespace

RetrievalResult grounding_metrics(const std::vector<std::vector<Embedding>>& scene_views,
                                  std::span<const Embedding> queries, std::span<const GroundingInstance> instances,
                                  std::span<const std::size_t> ns) {
  check_ns(ns);
  if (queries.size() != instances.size()) throw ContractError("grounding_metrics: one query per instance required");
  std::map<std::size_t, std::size_t> hits;
  std::size_t visible_hits = 0, counted = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    if (inst.scene_index >= scene_views.size()) throw ContractError("grounding instance references a missing scene");
    const auto& views = scene_views[inst.scene_index];
    if (views.empty()) {
      log::warning("scene " + inst.scene_id + " has no views; instance skipped");
      continue;
    }
    const auto order = rank_by_cosine(views, queries[i]);
    const auto pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), inst.gt_view) - order.begin());
    for (const auto n : ns) hits[n] += pos < n ? 1 : 0;
    if (std::binary_search(inst.visible_set.begin(), inst.visible_set.end(), order.front())) ++visible_hits;
    ++counted;
  }
  RetrievalResult r;
  r.instances = counted;
  const double denom = counted == 0 ? 1.0 : static_cast<double>(counted);
  for (const auto n : ns) r.recall_at[n] = static_cast<double>(hits[n]) / denom;
  r.visible_set_accuracy = static_cast<double>(visible_hits) / denom;
  return r;
}

std::vector<std::vector<Embedding>> embed_scene_views(const EvalEncoder& encoder, std::span<const Scene> scenes,
                                                      std::size_t max_views, double voxel_size) {
  if (encoder.params == nullptr) throw ContractError("EvalEncoder has no parameters");
  std::vector<std::vector<Embedding>> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t s) {
    const auto pms = scenes[s].pointmaps();
    if (pms.empty()) return;
    std::vector<std::size_t> chosen(pms.size());
    std::iota(chosen.begin(), chosen.end(), 0);
    if (max_views > 0 && max_views < pms.size()) chosen = max_coverage_sample(pms, max_views, voxel_size);
    std::vector<ViewInput> inputs;
    for (const auto v : chosen) inputs.push_back({scenes[s].views[v].image, &pms[v]});
    for (auto& e : encode_views(inputs, *encoder.params, encoder.config, encoder.modality)) {
      out[s].push_back(std::move(e.h));
    }
  });
  return out;
}

std::vector<Embedding> embed_texts(const EvalEncoder& encoder, const std::vector<std::string>& texts) {
  if (encoder.params == nullptr) throw ContractError("EvalEncoder has no parameters");
  constexpr std::size_t kChunk = 256;
  std::vector<Embedding> out;
  NoGradGuard guard;
  for (std::size_t i = 0; i < texts.size(); i += kChunk) {
    const std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(i),
                                         texts.begin() + static_cast<std::ptrdiff_t>(std::min(texts.size(), i + kChunk)));
    const Tensor t = encode_text_batch(chunk, *encoder.params, encoder.config);
    const std::size_t d = t.cols();
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      out.emplace_back(t.data().begin() + static_cast<std::ptrdiff_t>(r * d),
                       t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
    }
  }
  return out;
}

Embedding mean_pool(std::span<const Embedding> views) {
  std::vector<ViewEmbedding> v;
  for (const auto& e : views) v.push_back({e});
  return pool_scene(v).h_bar;
}

RetrievalResult viewpoint_grounding(const EvalEncoder& encoder, std::span<const Scene> scenes,
                                    std::span<const GroundingInstance> instances, std::span<const std::size_t> ns) {
  const auto views = embed_scene_views(encoder, scenes);
  std::vector<std::string> texts;
  for (const auto& i : instances) texts.push_back(i.referring_text);
  const auto queries = embed_texts(encoder, texts);
  return grounding_metrics(views, queries, instances, ns);
}

std::vector<RetrievalCaption> build_retrieval_captions(std::span<const Scene> scenes, std::size_t n) {
  if (n < 1) throw ContractError("captions need at least one utterance");
  std::vector<RetrievalCaption> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    std::vector<std::string> texts;
    for (const auto& o : scenes[s].objects) texts.push_back(o.referring_text);
    if (texts.empty()) continue;
    const auto join = [&](std::size_t lo, std::size_t hi) {
      std::string c;
      for (std::size_t i = lo; i < hi; ++i) c += (i > lo ? ". " : "") + texts[i];
      return c;
    };
    if (texts.size() < n) {
      log::info("scene " + scenes[s].scene_id + " has " + std::to_string(texts.size()) +
                " referring texts; using one shorter caption");
      out.push_back({join(0, texts.size()), s});
      continue;
    }
    for (std::size_t lo = 0; lo + n <= texts.size(); lo += n) out.push_back({join(lo, lo + n), s});
  }
  return out;
}

RetrievalResult retrieval_metrics(std::span<const Embedding> scene_embeddings,
                                  std::span<const Embedding> caption_embeddings,
                                  std::span<const std::size_t> ground_truth, std::span<const std::size_t> ns) {
  check_ns(ns);
  if (caption_embeddings.size() != ground_truth.size()) throw ContractError("retrieval: one scene per caption required");
  std::map<std::size_t, std::size_t> hits;
  for (std::size_t c = 0; c < caption_embeddings.size(); ++c) {
    if (ground_truth[c] >= scene_embeddings.size()) throw ContractError("retrieval: caption references a missing scene");
    const auto order = rank_by_cosine(scene_embeddings, caption_embeddings[c]);
    const auto pos = static_cast<std::size_t>(std::find(order.begin(), order.end(), ground_truth[c]) - order.begin());
    for (const auto n : ns) hits[n] += pos < n ? 1 : 0;
  }
  RetrievalResult r;
  r.instances = caption_embeddings.size();
  const double denom = r.instances == 0 ? 1.0 : static_cast<double>(r.instances);
  for (const auto n : ns) r.recall_at[n] = static_cast<double>(hits[n]) / denom;
  return r;
}

RetrievalResult scene_retrieval(const EvalEncoder& encoder, std::span<const Scene> scenes, std::size_t n,
                                std::size_t max_views, double voxel_size) {
  const auto views = embed_scene_views(encoder, scenes, max_views, voxel_size);
  std::vector<Embedding> pooled;
  for (const auto& v : views) pooled.push_back(mean_pool(v));
  const auto captions = build_retrieval_captions(scenes, n);
  std::vector<std::string> texts;
  std::vector<std::size_t> gt;
  for (const auto& c : captions) {
    texts.push_back(c.text);
    gt.push_back(c.scene_index);
  }
  return retrieval_metrics(pooled, embed_texts(encoder, texts), gt);
}

const std::vector<std::string>& default_prompt_templates() {
  static const std::vector<std::string> kTemplates = {"This room is a {}.", "The room type is {}.", "The scene is a {}.",
                                                      "This indoor scene is a {}."};
  return kTemplates;
}

std::string instantiate_template(const std::string& templ, const std::string& class_name) {
  const auto pos = templ.find("{}");
  if (pos == std::string::npos) throw ConfigError("prompt template '" + templ + "' has no {} placeholder");
  return templ.substr(0, pos) + class_name + templ.substr(pos + 2);
}

std::size_t classify(std::span<const double> embedding, std::span<const Embedding> class_embeddings) {
  if (class_embeddings.empty()) throw ContractError("classify: no classes");
  return rank_by_cosine(class_embeddings, embedding).front();
}

double classification_accuracy(std::span<const Embedding> embeddings, std::span<const Embedding> class_embeddings,
                               std::span<const std::size_t> labels) {
  if (embeddings.size() != labels.size()) throw ContractError("classification: one label per embedding required");
  if (embeddings.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < embeddings.size(); ++i) correct += classify(embeddings[i], class_embeddings) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(embeddings.size());
}

std::vector<std::size_t> scene_labels(std::span<const Scene> scenes, std::span<const std::string> class_names) {
  std::vector<std::size_t> out;
  for (const auto& s : scenes) {
    const auto it = std::find(class_names.begin(), class_names.end(), s.scene_type);
    if (it == class_names.end()) throw ContractError("scene type '" + s.scene_type + "' is not among the classes");
    out.push_back(static_cast<std::size_t>(it - class_names.begin()));
  }
  return out;
}

double zero_shot_classify(const EvalEncoder& encoder, std::span<const Scene> scenes,
                          std::span<const std::string> class_names, std::span<const std::string> templates) {
  if (class_names.size() < 2) throw ContractError("zero-shot classification needs at least 2 classes");
  if (templates.empty()) throw ContractError("zero-shot classification needs at least one template");
  const auto labels = scene_labels(scenes, class_names);
  std::vector<Embedding> classes;
  for (const auto& name : class_names) {
    std::vector<std::string> prompts;
    for (const auto& t : templates) prompts.push_back(instantiate_template(t, name));
    classes.push_back(mean_pool(embed_texts(encoder, prompts)));
  }
  const auto views = embed_scene_views(encoder, scenes);
  std::vector<Embedding> pooled;
  for (const auto& v : views) pooled.push_back(mean_pool(v));
  return classification_accuracy(pooled, classes, labels);
}

}  // namespace upm
