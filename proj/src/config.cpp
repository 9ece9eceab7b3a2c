#include "upm/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "text_format.hpp"
#include "upm/error.hpp"

namespace upm {

namespace {

using Setter = std::function<void(RunConfig&, const std::string&)>;

[[noreturn]] void bad_value(const std::string& what) { throw ConfigError(what); }

double as_double(const std::string& v) {
  const auto d = text::parse_double(v);
  if (!d) bad_value("expected a number, got '" + v + "'");
  return *d;
}

std::size_t as_size(const std::string& v) {
  const auto u = text::parse_u64(v);
  if (!u) bad_value("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(*u);
}

bool as_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value("expected true/false, got '" + v + "'");
}

std::vector<std::string> as_list(const std::string& v) {
  std::vector<std::string> out;
  for (const auto& part : text::split(v, ',')) {
    const auto t = text::trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::vector<std::size_t> as_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : as_list(v)) out.push_back(as_size(s));
  return out;
}

template <class T>
Setter num(T RunConfig::*section, double T::*field) {
  return [=](RunConfig& c, const std::string& v) { c.*section.*field = as_double(v); };
}
template <class T>
Setter size(T RunConfig::*section, std::size_t T::*field) {
  return [=](RunConfig& c, const std::string& v) { c.*section.*field = as_size(v); };
}
template <class T>
Setter flag(T RunConfig::*section, bool T::*field) {
  return [=](RunConfig& c, const std::string& v) { c.*section.*field = as_bool(v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    using R = RunConfig;
    t["encoder.image_size"] = size(&R::encoder, &EncoderConfig::image_size);
    t["encoder.patch_size"] = size(&R::encoder, &EncoderConfig::patch_size);
    t["encoder.embed_dim"] = size(&R::encoder, &EncoderConfig::embed_dim);
    t["encoder.num_blocks"] = size(&R::encoder, &EncoderConfig::num_blocks);
    t["encoder.num_heads"] = size(&R::encoder, &EncoderConfig::num_heads);
    t["encoder.mlp_ratio"] = size(&R::encoder, &EncoderConfig::mlp_ratio);
    t["encoder.text_vocab_size"] = size(&R::encoder, &EncoderConfig::text_vocab_size);
    t["encoder.text_context_length"] = size(&R::encoder, &EncoderConfig::text_context_length);
    t["encoder.layer_norm_eps"] = num(&R::encoder, &EncoderConfig::layer_norm_eps);

    t["train.epochs"] = size(&R::train, &TrainConfig::epochs);
    t["train.scenes_per_batch"] = size(&R::train, &TrainConfig::scenes_per_batch);
    t["train.views_per_scene"] = size(&R::train, &TrainConfig::views_per_scene);
    t["train.learning_rate"] = num(&R::train, &TrainConfig::learning_rate);
    t["train.warmup_fraction"] = num(&R::train, &TrainConfig::warmup_fraction);
    t["train.seed"] = [](R& c, const std::string& v) { c.train.seed = as_size(v); };
    t["train.loss_lambda"] = num(&R::train, &TrainConfig::loss_lambda);
    t["train.init_temperature"] = num(&R::train, &TrainConfig::init_temperature);
    t["train.per_loss_temperature"] = flag(&R::train, &TrainConfig::per_loss_temperature);
    t["train.use_geo"] = flag(&R::train, &TrainConfig::use_geo);
    t["train.use_ground"] = flag(&R::train, &TrainConfig::use_ground);
    t["train.use_view"] = flag(&R::train, &TrainConfig::use_view);
    t["train.use_scene"] = flag(&R::train, &TrainConfig::use_scene);
    t["train.modality"] = [](R& c, const std::string& v) { c.train.modality = parse_modality(v); };
    t["train.freeze_text"] = flag(&R::train, &TrainConfig::freeze_text);
    t["train.grad_clip"] = num(&R::train, &TrainConfig::grad_clip);
    t["train.voxel_size"] = num(&R::train, &TrainConfig::voxel_size);
    t["train.min_points"] = size(&R::train, &TrainConfig::min_points);
    t["train.chamfer_points"] = size(&R::train, &TrainConfig::chamfer_points);
    t["train.beta1"] = [](R& c, const std::string& v) { c.train.adamw.beta1 = as_double(v); };
    t["train.beta2"] = [](R& c, const std::string& v) { c.train.adamw.beta2 = as_double(v); };
    t["train.weight_decay"] = [](R& c, const std::string& v) { c.train.adamw.weight_decay = as_double(v); };
    t["train.adam_eps"] = [](R& c, const std::string& v) { c.train.adamw.eps = as_double(v); };

    t["geo.alpha"] = [](R& c, const std::string& v) { c.train.geo.alpha = as_double(v); };
    t["geo.tau_r"] = [](R& c, const std::string& v) { c.train.geo.tau_r = as_double(v); };

    t["data.extent_min"] = num(&R::data, &SceneSpec::extent_min);
    t["data.extent_max"] = num(&R::data, &SceneSpec::extent_max);
    t["data.min_objects"] = size(&R::data, &SceneSpec::min_objects);
    t["data.max_objects"] = size(&R::data, &SceneSpec::max_objects);
    t["data.scene_type"] = [](R& c, const std::string& v) { c.data.scene_type = v; };
    t["data.image_size"] = size(&R::data, &SceneSpec::image_size);
    t["data.horizontal_fov_deg"] = num(&R::data, &SceneSpec::horizontal_fov_deg);
    t["data.min_points"] = size(&R::data, &SceneSpec::min_points);
    t["data.view_count"] = [](R& c, const std::string& v) { c.data.ring.view_count = as_size(v); };
    t["data.radius_min"] = [](R& c, const std::string& v) { c.data.ring.radius_min = as_double(v); };
    t["data.radius_max"] = [](R& c, const std::string& v) { c.data.ring.radius_max = as_double(v); };
    t["data.height_min"] = [](R& c, const std::string& v) { c.data.ring.height_min = as_double(v); };
    t["data.height_max"] = [](R& c, const std::string& v) { c.data.ring.height_max = as_double(v); };
    t["data.angle_jitter"] = [](R& c, const std::string& v) { c.data.ring.angle_jitter = as_double(v); };
    t["data.target_jitter"] = [](R& c, const std::string& v) { c.data.ring.target_jitter = as_double(v); };

    t["eval.tasks"] = [](R& c, const std::string& v) { c.eval.tasks = as_list(v); };
    t["eval.split"] = [](R& c, const std::string& v) { c.eval.split = v; };
    t["eval.min_points"] = size(&R::eval, &EvalOptions::min_points);
    t["eval.utterances"] = [](R& c, const std::string& v) { c.eval.utterances = as_size_list(v); };
    t["eval.view_curve"] = [](R& c, const std::string& v) { c.eval.view_curve = as_size_list(v); };
    t["eval.class_names"] = [](R& c, const std::string& v) { c.eval.class_names = as_list(v); };
    t["eval.zero_shot_template"] = [](R& c, const std::string& v) { c.eval.zero_shot_template = v; };
    t["eval.modality"] = [](R& c, const std::string& v) { c.eval.modality = parse_modality(v); };
    t["eval.probe_shots"] = [](R& c, const std::string& v) { c.eval.probe.shots = as_size(v); };
    t["eval.probe_max_iterations"] = [](R& c, const std::string& v) { c.eval.probe.max_iterations = as_size(v); };
    t["eval.probe_holdout"] = [](R& c, const std::string& v) { c.eval.probe.holdout_fraction = as_double(v); };

    t["run.threads"] = [](R& c, const std::string& v) { c.threads = as_size(v); };
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& valid_tasks() {
  static const std::vector<std::string> tasks = {"grounding", "retrieval", "classify0", "probe"};
  return tasks;
}

void EvalOptions::validate() const {
  for (const auto& t : tasks) {
    if (std::find(valid_tasks().begin(), valid_tasks().end(), t) == valid_tasks().end()) {
      throw ConfigError("unknown task '" + t + "'; valid tasks: grounding, retrieval, classify0, probe");
    }
  }
  if (split != "train" && split != "val" && split != "test") throw ConfigError("eval split must be train, val or test");
  if (min_points == 0) throw ConfigError("eval min_points must be positive");
  if (utterances.empty()) throw ConfigError("eval utterances must not be empty");
  for (const auto n : utterances) {
    if (n == 0) throw ConfigError("eval utterances must be positive");
  }
  for (const auto n : view_curve) {
    if (n == 0) throw ConfigError("eval view_curve entries must be positive");
  }
  if (class_names.size() < 2) throw ConfigError("eval needs at least two class names");
  if (zero_shot_template.find("{}") == std::string::npos) throw ConfigError("zero_shot_template needs a {} slot");
  probe.validate();
}

void RunConfig::validate() const {
  encoder.validate();
  train.validate();
  data.validate();
  eval.validate();
  if (data.image_size != encoder.image_size) {
    throw ConfigError("data.image_size (" + std::to_string(data.image_size) + ") must equal encoder.image_size (" +
                      std::to_string(encoder.image_size) + ")");
  }
}

void apply_setting(RunConfig& config, const std::string& section, const std::string& key, const std::string& value,
                   const std::string& where) {
  const auto it = setters().find(section + "." + key);
  if (it == setters().end()) throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
  try {
    it->second(config, value);
  } catch (const Error& e) {
    throw ConfigError(where + ": " + section + "." + key + ": " + e.what());
  }
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' must look like section.key=value");
  }
  apply_setting(config, std::string(text::trim(assignment.substr(0, dot))),
                std::string(text::trim(assignment.substr(dot + 1, eq - dot - 1))),
                std::string(text::trim(assignment.substr(eq + 1))), "--set");
}

RunConfig parse_run_config(const std::string& body, const std::string& source_name, RunConfig base) {
  std::istringstream in(body);
  std::string line, section;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    const std::string where = source_name + ":" + std::to_string(no);
    auto cut = line.find_first_of("#;");
    const auto t = text::trim(std::string_view(line).substr(0, cut));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(where + ": malformed section header");
      section = std::string(text::trim(t.substr(1, t.size() - 2)));
      static const std::vector<std::string> known = {"encoder", "train", "geo", "data", "eval", "run"};
      if (std::find(known.begin(), known.end(), section) == known.end()) {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of any [section]");
    apply_setting(base, section, std::string(text::trim(t.substr(0, eq))), std::string(text::trim(t.substr(eq + 1))),
                  where);
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return parse_run_config(s.str(), path.string(), std::move(base));
}

}  // namespace upm
