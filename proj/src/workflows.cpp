#include "upm/workflows.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "text_format.hpp"
#include "upm/error.hpp"
#include "upm/log.hpp"
#include "upm/parallel.hpp"
#include "upm/rng.hpp"

namespace upm {

namespace fs = std::filesystem;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
  // create_directories succeeds on existing read-only directories; probe for write access.
  const fs::path probe = dir / ".upm_write_probe";
  {
    std::FILE* f = std::fopen(probe.c_str(), "wb");
    if (f == nullptr) throw ConfigError("output directory " + dir.string() + " is not writable");
    std::fclose(f);
  }
  fs::remove(probe, ec);
}

std::string scene_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

std::vector<Embedding> pooled(const std::vector<std::vector<Embedding>>& views) {
  std::vector<Embedding> out;
  out.reserve(views.size());
  for (const auto& v : views) out.push_back(mean_pool(v));
  return out;
}

LabeledSet labeled(const std::vector<Embedding>& emb, const std::vector<std::size_t>& labels) {
  LabeledSet set;
  set.dim = emb.empty() ? 0 : emb.front().size();
  for (std::size_t i = 0; i < emb.size(); ++i) set.push_back(emb[i], labels[i]);
  return set;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void print_summary(const EvalReport& rep, std::ostream& out) {
  if (rep.grounding) {
    out << "grounding      instances    R@1     R@5     R@10    visible\n";
    for (const auto& r : *rep.grounding) {
      char line[160];
      std::snprintf(line, sizeof line, "  %-12s %9zu  %s  %s  %s  %s\n", r.name.c_str(), r.result.instances,
                    fmt(r.result.recall_at.at(1)).c_str(), fmt(r.result.recall_at.at(5)).c_str(),
                    fmt(r.result.recall_at.at(10)).c_str(), fmt(r.result.visible_set_accuracy.value_or(NAN)).c_str());
      out << line;
    }
  }
  if (rep.retrieval) {
    out << "retrieval      captions     R@1     R@5\n";
    for (const auto& r : *rep.retrieval) {
      char line[160];
      std::snprintf(line, sizeof line, "  %-12s %9zu  %s  %s\n", r.name.c_str(), r.result.instances,
                    fmt(r.result.recall_at.at(1)).c_str(), fmt(r.result.recall_at.at(5)).c_str());
      out << line;
    }
  }
  if (rep.classification) {
    out << "classification count        accuracy\n";
    for (const auto& r : *rep.classification) {
      char line[160];
      std::snprintf(line, sizeof line, "  %-20s %5zu  %s\n", r.method.c_str(), r.count, fmt(r.accuracy).c_str());
      out << line;
    }
  }
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) { return mix_seed(seed, index); }

Manifest cmd_gen(const RunConfig& config, const fs::path& out_dir, std::size_t count, std::uint64_t seed) {
  config.validate();
  if (count == 0) throw ConfigError("gen: count must be positive");
  ensure_dir(out_dir);
  std::vector<Scene> scenes(count);
  parallel_for(count, [&](std::size_t i) { scenes[i] = generate_scene(config.data, scene_seed(seed, i)); });
  const auto splits = assign_splits(count, seed);
  Manifest manifest;
  manifest.root = out_dir;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string name = scene_dir_name(i);
    save_scene(scenes[i], out_dir / name);
    manifest.entries.push_back({splits[i], name});
  }
  save_manifest(manifest, out_dir / "manifest.tsv");
  log::info("gen: wrote " + std::to_string(count) + " scenes to " + out_dir.string());
  return manifest;
}

TrainResult cmd_pretrain(const RunConfig& config, const fs::path& manifest_path, const fs::path& out_dir) {
  config.validate();
  if (!fs::exists(manifest_path)) throw ConfigError("manifest " + manifest_path.string() + " does not exist");
  ensure_dir(out_dir);
  const Manifest manifest = load_manifest(manifest_path);
  auto result = train(manifest, config.train, config.encoder, out_dir);
  if (result.steps.empty() || !std::isfinite(result.steps.back().loss.total)) {
    throw NumericError("training ended without a finite loss");
  }
  return result;
}

EvalReport cmd_eval(const RunConfig& config, const fs::path& checkpoint, const fs::path& manifest_path,
                    const fs::path& out_dir, std::ostream& out) {
  config.validate();
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint " + checkpoint.string() + " does not exist");
  if (!fs::exists(manifest_path)) throw ConfigError("manifest " + manifest_path.string() + " does not exist");
  ensure_dir(out_dir);
  const TrainedModel model = model_from_checkpoint(load_checkpoint(checkpoint));
  const Manifest manifest = load_manifest(manifest_path);
  const auto& opt = config.eval;
  const auto scenes = load_split(manifest, opt.split);
  if (scenes.empty()) throw ConfigError("eval: the " + opt.split + " split is empty");

  const EvalEncoder enc{&model.params, model.config, opt.modality.value_or(model.modality)};
  const auto wants = [&](const char* task) {
    return std::find(opt.tasks.begin(), opt.tasks.end(), task) != opt.tasks.end();
  };
  const auto views = embed_scene_views(enc, scenes);
  const auto scene_emb = pooled(views);

  EvalReport rep;
  std::vector<PlotPoint> plot;
  if (wants("grounding")) {
    const auto instances = make_grounding_instances(scenes, opt.min_points);
    std::vector<std::string> texts;
    for (const auto& i : instances) texts.push_back(i.referring_text);
    const auto queries = embed_texts(enc, texts);
    const auto unique = filter_unique(instances);
    std::vector<Embedding> unique_queries;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      if (instances[i].visible_set.size() == 1) unique_queries.push_back(queries[i]);
    }
    rep.grounding.emplace();
    rep.grounding->push_back({"all", grounding_metrics(views, queries, instances)});
    rep.grounding->push_back({"unique", grounding_metrics(views, unique_queries, unique)});
  }
  if (wants("retrieval")) {
    rep.retrieval.emplace();
    for (const auto n : opt.utterances) {
      const auto captions = build_retrieval_captions(scenes, n);
      std::vector<std::string> texts;
      std::vector<std::size_t> gt;
      for (const auto& c : captions) {
        texts.push_back(c.text);
        gt.push_back(c.scene_index);
      }
      rep.retrieval->push_back({"utterances-" + std::to_string(n), n,
                                retrieval_metrics(scene_emb, embed_texts(enc, texts), gt)});
    }
    std::size_t max_views = 0;
    for (const auto& s : scenes) max_views = std::max(max_views, s.views.size());
    for (const auto k : opt.view_curve) {
      if (k > max_views) continue;
      const auto r = scene_retrieval(enc, scenes, opt.utterances.front(), k, config.train.voxel_size);
      plot.push_back({"retrieval_r1_vs_views", static_cast<double>(k), r.recall_at.at(1)});
    }
  }
  if (wants("classify0") || wants("probe")) rep.classification.emplace();
  if (wants("classify0")) {
    const auto labels = scene_labels(scenes, opt.class_names);
    for (const bool ensemble : {false, true}) {
      const std::vector<std::string> templates =
          ensemble ? default_prompt_templates() : std::vector<std::string>{opt.zero_shot_template};
      std::vector<Embedding> classes;
      for (const auto& name : opt.class_names) {
        std::vector<std::string> prompts;
        for (const auto& t : templates) prompts.push_back(instantiate_template(t, name));
        classes.push_back(mean_pool(embed_texts(enc, prompts)));
      }
      rep.classification->push_back({ensemble ? "zero-shot-ensemble" : "zero-shot",
                                     classification_accuracy(scene_emb, classes, labels), scenes.size()});
    }
  }
  if (wants("probe")) {
    const auto train_scenes = load_split(manifest, "train");
    if (train_scenes.empty()) throw ConfigError("probe: the train split is empty");
    const auto train_set = labeled(pooled(embed_scene_views(enc, train_scenes)), scene_labels(train_scenes, opt.class_names));
    const auto test_set = labeled(scene_emb, scene_labels(scenes, opt.class_names));
    std::vector<std::size_t> per_class(opt.class_names.size(), 0);
    for (const auto y : train_set.labels) ++per_class[y];
    const std::size_t fewest = *std::min_element(per_class.begin(), per_class.end());
    ProbeConfig probe_cfg = opt.probe;
    if (fewest == 0) {
      log::warning("probe skipped: some class has no training scenes");
    } else {
    if (fewest < probe_cfg.shots) {
      log::warning("probe: a class has only " + std::to_string(fewest) + " training scenes; using " +
                   std::to_string(fewest) + " shots instead of " + std::to_string(probe_cfg.shots));
      probe_cfg.shots = fewest;
    }
    const auto result = linear_probe(train_set, test_set, opt.class_names.size(), probe_cfg);
    rep.classification->push_back({"probe-" + std::to_string(probe_cfg.shots), result.test_accuracy, scenes.size()});
    for (std::size_t shots = 1; shots < probe_cfg.shots; shots *= 2) {
      ProbeConfig pc = probe_cfg;
      pc.shots = shots;
      plot.push_back({"probe_accuracy_vs_shots", static_cast<double>(shots),
                      linear_probe(train_set, test_set, opt.class_names.size(), pc).test_accuracy});
    }
    plot.push_back({"probe_accuracy_vs_shots", static_cast<double>(probe_cfg.shots), result.test_accuracy});
    }
  }
  if (!plot.empty()) rep.plot = std::move(plot);
  emit_report(rep, out_dir);
  print_summary(rep, out);
  return rep;
}

double spearman_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ContractError("spearman_correlation: length mismatch");
  if (a.size() < 2) return 0.0;
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

InspectResult inspect_scene(const TrainedModel& model, const Scene& scene, std::size_t chamfer_points) {
  const EvalEncoder enc{&model.params, model.config, model.modality};
  InspectResult r;
  r.embeddings = embed_scene_views(enc, std::span<const Scene>(&scene, 1)).front();
  const std::size_t v = r.embeddings.size();
  r.similarity.assign(v * v, 0.0);
  for (std::size_t i = 0; i < v; ++i) {
    for (std::size_t j = i; j < v; ++j) {
      r.similarity[i * v + j] = r.similarity[j * v + i] = cosine_similarity(r.embeddings[i], r.embeddings[j]);
    }
  }
  const auto pms = scene.pointmaps();
  r.chamfer = chamfer_matrix(pms, Subsample{chamfer_points, 0});
  double total = 0.0;
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < v && v >= 3; ++i) {
    std::vector<double> sim, neg_cd;
    for (std::size_t j = 0; j < v; ++j) {
      if (j == i) continue;
      sim.push_back(r.similarity[i * v + j]);
      neg_cd.push_back(-r.chamfer[i * v + j]);
    }
    total += spearman_correlation(sim, neg_cd);
    ++anchors;
  }
  r.spearman = anchors == 0 ? 0.0 : total / static_cast<double>(anchors);
  return r;
}

InspectResult cmd_inspect(const fs::path& checkpoint, const fs::path& scene_dir, std::ostream& out) {
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint " + checkpoint.string() + " does not exist");
  if (!fs::exists(scene_dir / "scene.txt")) throw ConfigError("no scene at " + scene_dir.string());
  const TrainedModel model = model_from_checkpoint(load_checkpoint(checkpoint));
  const Scene scene = load_scene(scene_dir);
  const auto r = inspect_scene(model, scene);
  const std::size_t v = r.embeddings.size();
  out << "scene " << scene.scene_id << " (" << scene.scene_type << "), " << v << " views\n";
  out << "embeddings\n";
  for (std::size_t i = 0; i < v; ++i) {
    out << "  view " << i << ':';
    for (const double x : r.embeddings[i]) out << ' ' << text::number(x);
    out << '\n';
  }
  out << "cosine similarity\n";
  for (std::size_t i = 0; i < v; ++i) {
    out << ' ';
    for (std::size_t j = 0; j < v; ++j) out << ' ' << fmt(r.similarity[i * v + j]);
    out << '\n';
  }
  out << "chamfer vs embedding rank agreement (spearman): " << fmt(r.spearman) << '\n';
  return r;
}

}  // namespace upm
