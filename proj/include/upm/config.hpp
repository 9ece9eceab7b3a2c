#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "upm/data.hpp"
#include "upm/encoder.hpp"
#include "upm/probe.hpp"
#include "upm/trainer.hpp"

namespace upm {

struct EvalOptions {
  std::vector<std::string> tasks = {"grounding", "retrieval", "classify0", "probe"};
  std::string split = "test";
  std::size_t min_points = 16;
  std::vector<std::size_t> utterances = {1, 3, 5};
  std::vector<std::size_t> view_curve = {1, 2, 4, 8, 16};
  std::vector<std::string> class_names = {"bedroom", "kitchen", "office", "bathroom"};
  std::string zero_shot_template = "This room is a {}.";
  ProbeConfig probe;
  std::optional<Modality> modality;  // overrides the checkpoint's training modality

  void validate() const;
};

/// Every setting a command can consume, assembled from an INI-style file plus flag overrides.
struct RunConfig {
  EncoderConfig encoder;
  TrainConfig train;
  SceneSpec data = SceneSpec::desk();
  EvalOptions eval;
  std::size_t threads = 1;

  void validate() const;
};

const std::vector<std::string>& valid_tasks();

/// Applies one `key = value` from section `[section]`; `where` prefixes error messages.
void apply_setting(RunConfig& config, const std::string& section, const std::string& key, const std::string& value,
                   const std::string& where);
/// "section.key=value" form used by command-line overrides.
void apply_override(RunConfig& config, const std::string& assignment);

/// Parses `[section]` headers and `key = value` lines; '#' and ';' start comments.
/// Unknown sections or keys raise ConfigError with the file name and line number.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
RunConfig parse_run_config(const std::string& text, const std::string& source_name, RunConfig base = {});

}  // namespace upm
