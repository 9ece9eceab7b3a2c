#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "upm/eval.hpp"

namespace upm {

struct GroundingRow {
  std::string name;  // e.g. "all", "unique"
  RetrievalResult result;
};

struct RetrievalRow {
  std::string name;
  std::size_t utterances = 0;
  RetrievalResult result;
};

struct ClassificationRow {
  std::string method;  // "zero-shot" or "probe-<k>"
  double accuracy = 0.0;
  std::size_t count = 0;
};

struct PlotPoint {
  std::string series;
  double x = 0.0;
  double y = 0.0;
};

/// Sections left empty (nullopt) were not run and produce no file.
struct EvalReport {
  std::optional<std::vector<GroundingRow>> grounding;
  std::optional<std::vector<RetrievalRow>> retrieval;
  std::optional<std::vector<ClassificationRow>> classification;
  std::optional<std::vector<PlotPoint>> plot;
};

/// Writes grounding.tsv, retrieval.tsv, classification.tsv, plot_data.tsv (per engaged
/// section) and summary.txt with flat key=value lines.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

/// Reads back whatever section files exist in `dir`.
EvalReport read_report(const std::filesystem::path& dir);

std::vector<std::pair<std::string, double>> summary_entries(const EvalReport& report);

}  // namespace upm
