#include "upm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "text_format.hpp"
#include "upm/error.hpp"
#include "upm/log.hpp"
#include "upm/ops.hpp"
#include "upm/parallel.hpp"
#include "upm/rng.hpp"

namespace upm {

namespace fs = std::filesystem;

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, double warmup_fraction) {
  if (step > total_steps) throw ContractError("cosine_lr: step exceeds total_steps");
  const double total = static_cast<double>(total_steps);
  const double warmup = warmup_fraction * total;
  const double s = static_cast<double>(step);
  if (s < warmup) return base_lr * s / warmup;
  if (total <= warmup) return base_lr;
  const double progress = (s - warmup) / (total - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(std::span<const Parameter> params, OptimizerState& state, double lr, const AdamWConfig& config) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.size(), 0.0);
      state.v.emplace_back(p.tensor.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].tensor.size()) {
      throw ShapeError("adamw_step: moment shape mismatch for " + params[i].name);
    }
    if (!params[i].tensor.has_grad()) continue;
    for (const double g : params[i].tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + params[i].name);
    }
  }
  ++state.step;
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.tensor.requires_grad()) continue;
    Tensor handle = p.tensor;
    auto w = handle.mutable_data();
    const bool has_grad = p.tensor.has_grad();
    const std::span<const double> g = has_grad ? p.tensor.grad() : std::span<const double>{};
    auto& m = state.m[i];
    auto& v = state.v[i];
    const double wd = p.decay ? config.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has_grad ? g[j] : 0.0;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      const double mh = m[j] / c1, vh = v[j] / c2;
      w[j] -= lr * (mh / (std::sqrt(vh) + config.eps) + wd * w[j]);
    }
  }
}

double clip_grad_norm(std::span<const Parameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (const double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      Tensor handle = p.tensor;
      for (auto& g : handle.mutable_grad()) g *= f;
    }
  }
  return norm;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.epochs = 80;
  c.scenes_per_batch = 64;
  c.views_per_scene = 32;
  c.learning_rate = 1e-4;
  return c;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (scenes_per_batch < 1) throw ConfigError("scenes_per_batch must be >= 1");
  if (views_per_scene < 1) throw ConfigError("views_per_scene must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) {
    throw ConfigError("AdamW betas must lie in [0, 1)");
  }
  if (!(adamw.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(adamw.eps > 0.0)) throw ConfigError("AdamW eps must be > 0");
  if (!(loss_lambda >= 0.0)) throw ConfigError("loss lambda must be >= 0");
  if (!(init_temperature >= Temperature::kMin && init_temperature <= Temperature::kMax)) {
    throw ConfigError("initial temperature must lie in [1e-3, 100]");
  }
  if (!(voxel_size > 0.0)) throw ConfigError("voxel_size must be > 0");
  if (min_points < 1) throw ConfigError("min_points must be >= 1");
  if (chamfer_points < 1) throw ConfigError("chamfer_points must be >= 1");
  if (!(use_geo || use_ground || use_view || use_scene)) throw ConfigError("at least one loss term must be enabled");
  geo.validate();
}

TrainOutputs TrainOutputs::in(const fs::path& dir) {
  return {dir / "metrics.tsv", dir / "final.ckpt", dir / "best.ckpt"};
}

namespace {

/// Everything about a scene the loss needs, computed once per training run.
struct PreparedScene {
  std::vector<std::size_t> views;
  Tensor image_patches, point_patches;
  std::vector<double> geo_targets;
  std::vector<std::string> object_texts;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::string> view_captions;
  std::string scene_caption;
};

PreparedScene prepare_scene(const Scene& scene, const TrainConfig& tc, const EncoderConfig& ec) {
  PreparedScene ps;
  const auto pms = scene.pointmaps();
  const std::size_t k = std::min(tc.views_per_scene, pms.size());
  ps.views = max_coverage_sample(pms, k, tc.voxel_size);
  std::vector<Pointmap> chosen;
  std::vector<ViewInput> inputs;
  for (const auto v : ps.views) chosen.push_back(pms[v]);
  for (std::size_t i = 0; i < ps.views.size(); ++i) inputs.push_back({scene.views[ps.views[i]].image, &chosen[i]});
  const ViewBatch vb = make_view_batch(inputs, ec);
  ps.image_patches = vb.image_patches;
  ps.point_patches = vb.point_patches;
  if (tc.use_geo && chosen.size() >= 2) {
    const auto cd = chamfer_matrix(chosen, Subsample{tc.chamfer_points, tc.seed});
    ps.geo_targets = geo_targets(cd, chosen.size(), tc.geo);
  }
  for (const auto& o : scene.objects) ps.object_texts.push_back(o.referring_text);
  ps.pairs = visibility_pairs(chosen, scene.objects, tc.min_points);
  for (const auto v : ps.views) ps.view_captions.push_back(scene.view_captions.at(v));
  ps.scene_caption = scene.scene_caption;
  return ps;
}

std::vector<PreparedScene> prepare_all(std::span<const Scene> scenes, const TrainConfig& tc, const EncoderConfig& ec) {
  std::vector<PreparedScene> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { out[i] = prepare_scene(scenes[i], tc, ec); });
  return out;
}

/// Tensor for the loss named by `which` (0 geo, 1 ground, 2 view, 3 scene).
Tensor tau_for(const TrainedModel& model, std::size_t which) {
  return model.temperatures.size() == 1 ? model.temperatures[0].tau() : model.temperatures.at(which).tau();
}

TotalLoss batch_loss(const TrainedModel& model, const std::vector<const PreparedScene*>& batch, const TrainConfig& tc) {
  std::vector<Tensor> img, pts;
  std::vector<SceneSlice> slices;
  std::vector<std::vector<double>> targets;
  std::vector<std::size_t> group_sizes;
  std::size_t offset = 0;
  for (const auto* ps : batch) {
    img.push_back(ps->image_patches);
    pts.push_back(ps->point_patches);
    slices.push_back({offset, ps->views.size()});
    targets.push_back(ps->geo_targets);
    group_sizes.push_back(ps->views.size());
    offset += ps->views.size();
  }
  ViewBatch vb{concat_rows(img), concat_rows(pts), offset};
  const Tensor h = encode_view_batch(vb, model.params, model.config, model.modality);

  LossTerms terms;
  if (tc.use_geo) terms.geo = geo_loss(h, slices, targets, tau_for(model, 0));

  if (tc.use_ground || tc.use_view || tc.use_scene) {
    std::vector<std::string> texts;
    std::vector<GroundScene> ground;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      ground.push_back({slices[b], {texts.size(), batch[b]->object_texts.size()}, batch[b]->pairs});
      texts.insert(texts.end(), batch[b]->object_texts.begin(), batch[b]->object_texts.end());
    }
    const std::size_t n_obj = texts.size();
    for (const auto* ps : batch) texts.insert(texts.end(), ps->view_captions.begin(), ps->view_captions.end());
    for (const auto* ps : batch) texts.push_back(ps->scene_caption);
    const Tensor t = encode_text_batch(texts, model.params, model.config);
    if (tc.use_ground) {
      if (n_obj == 0) {
        log::warning("ground_loss: batch has no objects; term is zero");
      } else {
        terms.ground = ground_loss(h, slice_rows(t, 0, n_obj), ground, tau_for(model, 1));
      }
    }
    if (tc.use_view) terms.view = view_loss(h, slice_rows(t, n_obj, offset), tau_for(model, 2));
    if (tc.use_scene) {
      const Tensor scenes = pool_scene_embeddings(h, group_sizes);
      terms.scene = scene_loss(scenes, slice_rows(t, n_obj + offset, batch.size()), tau_for(model, 3));
    }
  }
  return total_loss(terms, tc.loss_lambda);
}

std::vector<Parameter> trainable(const TrainedModel& model) {
  std::vector<Parameter> out;
  for (const auto& [name, t] : model.params.named()) {
    if (t.requires_grad()) out.push_back({name, t, true});
  }
  static const char* kTauNames[] = {"objective.log_tau.geo", "objective.log_tau.ground", "objective.log_tau.view",
                                    "objective.log_tau.scene"};
  for (std::size_t i = 0; i < model.temperatures.size(); ++i) {
    out.push_back({model.temperatures.size() == 1 ? "objective.log_tau" : kTauNames[i],
                   model.temperatures[i].log_tau(), false});
  }
  return out;
}

TrainedModel snapshot(const TrainedModel& m) {
  TrainedModel out{m.config, m.params.clone(), {}, m.modality};
  for (const auto& t : m.temperatures) out.temperatures.push_back(t.clone());
  return out;
}

std::vector<std::vector<const PreparedScene*>> make_batches(const std::vector<PreparedScene>& scenes,
                                                            std::span<const std::size_t> order, std::size_t per_batch) {
  std::vector<std::vector<const PreparedScene*>> out;
  for (std::size_t i = 0; i < order.size(); i += per_batch) {
    std::vector<const PreparedScene*> b;
    for (std::size_t j = i; j < std::min(order.size(), i + per_batch); ++j) b.push_back(&scenes[order[j]]);
    out.push_back(std::move(b));
  }
  return out;
}

double mean_loss(const TrainedModel& model, const std::vector<PreparedScene>& scenes, const TrainConfig& tc) {
  NoGradGuard guard;
  std::vector<std::size_t> order(scenes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double total = 0.0;
  const auto batches = make_batches(scenes, order, tc.scenes_per_batch);
  for (const auto& b : batches) total += batch_loss(model, b, tc).breakdown.total;
  return total / static_cast<double>(batches.size());
}

void write_metrics_header(std::ofstream& out) { out << "step\tlr\tl_geo\tl_ground\tl_view\tl_scene\ttotal\ttau\n"; }

void write_metrics_row(std::ofstream& out, const StepMetrics& m) {
  out << m.step << '\t' << text::number(m.lr) << '\t' << text::number(m.loss.l_geo) << '\t'
      << text::number(m.loss.l_ground) << '\t' << text::number(m.loss.l_view) << '\t'
      << text::number(m.loss.l_scene) << '\t' << text::number(m.loss.total) << '\t' << text::number(m.tau) << '\n';
}

}  // namespace

Checkpoint make_checkpoint(const TrainedModel& model, const TrainConfig& config, std::size_t steps) {
  Checkpoint ck;
  ck.config = model.config;
  ck.metadata = {{"seed", std::to_string(config.seed)},
                 {"steps", std::to_string(steps)},
                 {"modality", to_string(model.modality)},
                 {"loss_lambda", text::number(config.loss_lambda)},
                 {"temperatures", std::to_string(model.temperatures.size())}};
  ck.tensors = model.params.named();
  for (const auto& p : trainable(model)) {
    if (p.name.rfind("objective.", 0) == 0) ck.tensors.push_back({p.name, p.tensor});
  }
  return ck;
}

TrainedModel model_from_checkpoint(const Checkpoint& checkpoint) {
  TrainedModel m;
  m.config = checkpoint.config;
  m.params = params_from_checkpoint(checkpoint);
  for (const auto& [k, v] : checkpoint.metadata) {
    if (k == "modality") m.modality = parse_modality(v);
  }
  if (const Tensor* t = checkpoint.find("objective.log_tau")) {
    m.temperatures.push_back(Temperature::from_log(t->item()));
  } else {
    for (const char* name : {"objective.log_tau.geo", "objective.log_tau.ground", "objective.log_tau.view",
                             "objective.log_tau.scene"}) {
      if (const Tensor* tt = checkpoint.find(name)) m.temperatures.push_back(Temperature::from_log(tt->item()));
    }
    if (m.temperatures.size() != 4) m.temperatures.assign(1, Temperature());
  }
  return m;
}

double evaluate_loss(const TrainedModel& model, std::span<const Scene> scenes, const TrainConfig& config) {
  if (scenes.empty()) throw DegenerateInputError("evaluate_loss: no scenes");
  return mean_loss(model, prepare_all(scenes, config, model.config), config);
}

TrainResult train(std::span<const Scene> train_scenes, std::span<const Scene> val_scenes, const TrainConfig& config,
                  const EncoderConfig& encoder_config, const TrainOutputs& outputs) {
  config.validate();
  encoder_config.validate();
  if (train_scenes.empty()) throw ConfigError("no training scenes");
  if (train_scenes.size() < config.scenes_per_batch) {
    throw ConfigError("need at least scenes_per_batch (" + std::to_string(config.scenes_per_batch) +
                      ") training scenes, got " + std::to_string(train_scenes.size()));
  }
  for (const auto& s : train_scenes) {
    if (s.views.size() < config.views_per_scene) {
      log::warning("scene " + s.scene_id + " has " + std::to_string(s.views.size()) + " views; views_per_scene " +
                   std::to_string(config.views_per_scene) + " capped");
      break;
    }
  }

  TrainedModel model;
  model.config = encoder_config;
  model.modality = config.modality;
  model.params = EncoderParams::init(encoder_config, config.seed);
  if (config.freeze_text) model.params.set_text_trainable(false);
  for (std::size_t i = 0; i < (config.per_loss_temperature ? 4u : 1u); ++i) {
    model.temperatures.emplace_back(config.init_temperature);
  }

  const auto train_prep = prepare_all(train_scenes, config, encoder_config);
  const auto val_prep = prepare_all(val_scenes, config, encoder_config);

  std::ofstream metrics;
  if (!outputs.metrics_log.empty()) {
    metrics.open(outputs.metrics_log, std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + outputs.metrics_log.string());
    write_metrics_header(metrics);
  }

  const std::size_t per_epoch = (train_prep.size() + config.scenes_per_batch - 1) / config.scenes_per_batch;
  const std::size_t total_steps = per_epoch * config.epochs;
  const auto params = trainable(model);
  OptimizerState opt;
  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(train_prep.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(mix_seed(config.seed, 1000 + epoch));
    rng.shuffle(order);
    double epoch_total = 0.0;
    const auto batches = make_batches(train_prep, order, config.scenes_per_batch);
    for (const auto& batch : batches) {
      ++step;
      const double lr = cosine_lr(step, total_steps, config.learning_rate, config.warmup_fraction);
      for (auto p : params) p.tensor.zero_grad();
      TotalLoss loss;
      try {
        loss = batch_loss(model, batch, config);
      } catch (const DegenerateInputError& e) {
        throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(loss.breakdown.total)) {
        throw NumericError("non-finite training loss at step " + std::to_string(step));
      }
      backward(loss.total);
      clip_grad_norm(params, config.grad_clip);
      adamw_step(params, opt, lr, config.adamw);
      for (const auto& p : params) {
        const auto w = p.tensor.data();
        if (!std::all_of(w.begin(), w.end(), [](double x) { return std::isfinite(x); })) {
          throw NumericError("parameter " + p.name + " became non-finite at step " + std::to_string(step));
        }
      }
      for (auto& t : model.temperatures) t.clamp();
      StepMetrics m{step, lr, loss.breakdown, model.temperatures[0].value()};
      if (metrics.is_open()) write_metrics_row(metrics, m);
      result.steps.push_back(m);
      epoch_total += loss.breakdown.total;
    }
    const double score =
        val_prep.empty() ? epoch_total / static_cast<double>(batches.size()) : mean_loss(model, val_prep, config);
    result.epoch_val_loss.push_back(score);
    log::info("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(config.epochs) + " train " +
              text::number(epoch_total / static_cast<double>(batches.size())) + " val " + text::number(score) +
              " tau " + text::number(model.temperatures[0].value()));
    if (score < best) {
      best = score;
      result.best_epoch = epoch;
      result.best_model = snapshot(model);
    }
  }
  if (val_prep.empty()) log::warning("no validation scenes; best checkpoint tracks the training epoch mean");
  if (metrics.is_open() && !metrics.flush()) throw IoError("failed writing " + outputs.metrics_log.string());

  for (auto& [name, t] : model.params.named()) t.zero_grad();
  result.final_model = snapshot(model);
  if (!result.best_model.params.cls_token.defined()) result.best_model = snapshot(model);
  if (!outputs.final_checkpoint.empty()) {
    save_checkpoint(outputs.final_checkpoint, make_checkpoint(result.final_model, config, step));
  }
  if (!outputs.best_checkpoint.empty()) {
    save_checkpoint(outputs.best_checkpoint, make_checkpoint(result.best_model, config, step));
  }
  return result;
}

TrainResult train(const Manifest& manifest, const TrainConfig& config, const EncoderConfig& encoder_config,
                  const fs::path& out_dir) {
  if (manifest.entries.empty()) throw ConfigError("manifest lists no scenes");
  const auto train_scenes = load_split(manifest, "train");
  const auto val_scenes = load_split(manifest, "val");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  return train(train_scenes, val_scenes, config, encoder_config, TrainOutputs::in(out_dir));
}

std::vector<StepMetrics> read_metrics_log(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<StepMetrics> out;
  std::string line;
  std::getline(in, line);
  for (std::size_t no = 2; std::getline(in, line); ++no) {
    const auto f = text::split(line, '\t');
    std::vector<double> v;
    for (const auto& s : f) {
      const auto d = text::parse_double(s);
      if (!d) throw FormatError(path.string() + ":" + std::to_string(no) + ": malformed number '" + s + "'");
      v.push_back(*d);
    }
    if (v.size() != 8) throw FormatError(path.string() + ":" + std::to_string(no) + ": expected 8 columns");
    StepMetrics m;
    m.step = static_cast<std::size_t>(v[0]);
    m.lr = v[1];
    m.loss = {v[2], v[3], v[4], v[5], v[6], 0.0};
    m.tau = v[7];
    out.push_back(m);
  }
  return out;
}

}  // namespace upm
