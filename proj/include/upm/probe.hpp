#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace upm {

/// f(x), writing ∇f(x) into grad.
using Objective = std::function<double(std::span<const double> x, std::span<double> grad)>;

struct LbfgsOptions {
  std::size_t history = 10;
  std::size_t max_iterations = 1000;
  double gradient_tolerance = 1e-9;  // on ‖∇f‖∞
  double c1 = 1e-4;                  // sufficient decrease
  double c2 = 0.9;                   // curvature
  std::size_t max_line_search = 40;
};

struct LbfgsResult {
  std::vector<double> x;
  double f = 0.0;
  std::size_t iterations = 0;
  std::size_t evaluations = 0;
  std::vector<double> objective_history;  // f at x0 and after every accepted step
  bool converged = false;
};

/// Limited-memory BFGS (two-loop recursion) with a strong-Wolfe line search.
LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsOptions& options = {});

/// Row-major feature matrix with integer class labels.
struct LabeledSet {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<std::size_t> labels;

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
  void push_back(std::span<const double> x, std::size_t label);
};

/// Multinomial logistic regression; parameters are [W (C×D) ; b (C)].
struct LogisticModel {
  std::size_t dim = 0, classes = 0;
  std::vector<double> weights;
  std::vector<double> bias;

  [[nodiscard]] std::size_t predict(std::span<const double> x) const;
  [[nodiscard]] double weight_norm() const;
};

/// Mean cross-entropy + (reg/2)·‖W‖²; the bias is not regularized.
double logistic_objective(const LabeledSet& data, std::size_t classes, double reg, std::span<const double> params,
                          std::span<double> grad);

LogisticModel fit_logistic(const LabeledSet& data, std::size_t classes, double reg, const LbfgsOptions& options = {},
                           LbfgsResult* info = nullptr);
double accuracy(const LogisticModel& model, const LabeledSet& data);

struct ProbeConfig {
  std::size_t shots = 5;
  std::vector<double> reg_grid = default_grid();
  std::size_t max_iterations = 1000;
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;

  /// 96 log-spaced values from 1e-6 to 1e6.
  static std::vector<double> default_grid();
  void validate() const;
};

struct ProbeResult {
  double test_accuracy = 0.0;
  double train_accuracy = 0.0;
  double chosen_reg = 0.0;
  std::size_t train_examples = 0;
};

/// Few-shot probe: `shots` seeded examples per class from `train`, regularization picked on a
/// held-out fold (ties prefer the larger value), refit on all shots, scored on `test`.
ProbeResult linear_probe(const LabeledSet& train, const LabeledSet& test, std::size_t classes,
                         const ProbeConfig& config);

}  // namespace upm
