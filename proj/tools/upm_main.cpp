// upm: gen / pretrain / eval / inspect.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "upm/config.hpp"
#include "upm/error.hpp"
#include "upm/log.hpp"
#include "upm/parallel.hpp"
#include "upm/rng.hpp"
#include "upm/workflows.hpp"

namespace {

constexpr int kUsage = 2;
constexpr int kNumeric = 3;
constexpr int kIo = 4;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "INI-style config file ([section] key = value)");
  cmd->add_option("--set", c.overrides, "override one setting, section.key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "seed for all randomness (falls back to UPM_SEED)");
  cmd->add_option("--threads", c.threads, "worker thread cap (0 = all cores)");
}

std::optional<std::uint64_t> resolve_seed(const Common& c) {
  if (c.seed) return c.seed;
  if (const char* env = std::getenv("UPM_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t pos = 0;
      const auto v = std::stoull(env, &pos);
      if (pos != std::string(env).size()) throw std::invalid_argument(env);
      return v;
    } catch (const std::exception&) {
      throw upm::ConfigError(std::string("UPM_SEED is not an unsigned integer: ") + env);
    }
  }
  return std::nullopt;
}

upm::RunConfig build_config(const Common& c) {
  upm::RunConfig cfg;
  if (!c.config_path.empty()) cfg = upm::load_run_config(c.config_path);
  for (const auto& o : c.overrides) upm::apply_override(cfg, o);
  if (c.threads) cfg.threads = *c.threads;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Colored-pointmap contrastive pretraining toolkit"};
  app.require_subcommand(1);

  Common gen_c, pre_c, eval_c;

  auto* gen = app.add_subcommand("gen", "generate a synthetic scene dataset and manifest");
  std::string gen_out;
  std::size_t gen_count = 64;
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--count", gen_count, "number of scenes");
  add_common(gen, gen_c);

  auto* pre = app.add_subcommand("pretrain", "train the encoder on a manifest's train split");
  std::string pre_manifest, pre_out, pre_modality;
  std::optional<std::size_t> pre_views, pre_epochs;
  bool no_geo = false, no_ground = false, no_view = false, no_scene = false;
  pre->add_option("--manifest", pre_manifest, "dataset manifest.tsv")->required();
  pre->add_option("--out", pre_out, "output run directory")->required();
  pre->add_option("--views", pre_views, "views sampled per scene");
  pre->add_option("--epochs", pre_epochs, "training epochs");
  pre->add_option("--modality", pre_modality, "full, image-only or pointmap-only");
  pre->add_flag("--no-geo", no_geo, "drop the geometry-aware alignment term");
  pre->add_flag("--no-ground", no_ground, "drop the grounded view alignment term");
  pre->add_flag("--no-view", no_view, "drop the view-caption term");
  pre->add_flag("--no-scene", no_scene, "drop the scene-caption term");
  add_common(pre, pre_c);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  std::string ev_ckpt, ev_manifest, ev_out, ev_tasks, ev_ablate, ev_split;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--manifest", ev_manifest, "dataset manifest.tsv")->required();
  ev->add_option("--out", ev_out, "report directory")->required();
  ev->add_option("--tasks", ev_tasks, "comma list of grounding, retrieval, classify0, probe");
  ev->add_option("--ablate-modality", ev_ablate, "image-only or pointmap-only");
  ev->add_option("--split", ev_split, "train, val or test (default test)");
  add_common(ev, eval_c);

  auto* ins = app.add_subcommand("inspect", "print view embeddings and their similarity matrix");
  std::string ins_ckpt, ins_scene;
  std::optional<std::size_t> ins_threads;
  ins->add_option("--checkpoint", ins_ckpt, "checkpoint file")->required();
  ins->add_option("--scene", ins_scene, "scene directory")->required();
  ins->add_option("--threads", ins_threads, "worker thread cap (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  try {
    if (*gen) {
      auto cfg = build_config(gen_c);
      const auto seed = resolve_seed(gen_c).value_or(cfg.data.seed);
      cfg.data.seed = seed;
      upm::set_max_threads(cfg.threads);
      const auto m = upm::cmd_gen(cfg, gen_out, gen_count, seed);
      std::cout << "wrote " << m.entries.size() << " scenes and " << (std::filesystem::path(gen_out) / "manifest.tsv").string()
                << '\n';
    } else if (*pre) {
      auto cfg = build_config(pre_c);
      if (const auto s = resolve_seed(pre_c)) cfg.train.seed = *s;
      if (pre_views) cfg.train.views_per_scene = *pre_views;
      if (pre_epochs) cfg.train.epochs = *pre_epochs;
      if (!pre_modality.empty()) cfg.train.modality = upm::parse_modality(pre_modality);
      if (no_geo) cfg.train.use_geo = false;
      if (no_ground) cfg.train.use_ground = false;
      if (no_view) cfg.train.use_view = false;
      if (no_scene) cfg.train.use_scene = false;
      upm::set_max_threads(cfg.threads);
      const auto r = upm::cmd_pretrain(cfg, pre_manifest, pre_out);
      std::cout << "trained " << r.steps.size() << " steps; final loss " << r.steps.back().loss.total << "; best epoch "
                << r.best_epoch << '\n';
    } else if (*ev) {
      auto cfg = build_config(eval_c);
      if (const auto s = resolve_seed(eval_c)) cfg.eval.probe.seed = *s;
      if (!ev_tasks.empty()) {
        cfg.eval.tasks.clear();
        upm::apply_setting(cfg, "eval", "tasks", ev_tasks, "--tasks");
      }
      if (!ev_split.empty()) cfg.eval.split = ev_split;
      if (!ev_ablate.empty()) {
        const auto m = upm::parse_modality(ev_ablate);
        if (m == upm::Modality::kFull) throw upm::ConfigError("--ablate-modality takes image-only or pointmap-only");
        cfg.eval.modality = m;
      }
      upm::set_max_threads(cfg.threads);
      upm::cmd_eval(cfg, ev_ckpt, ev_manifest, ev_out, std::cout);
    } else if (*ins) {
      upm::set_max_threads(ins_threads.value_or(1));
      upm::cmd_inspect(ins_ckpt, ins_scene, std::cout);
    }
  } catch (const upm::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const upm::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const upm::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const upm::FormatError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
