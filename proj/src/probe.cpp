#include "upm/probe.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <string>

#include "upm/error.hpp"
#include "upm/parallel.hpp"
#include "upm/rng.hpp"

namespace upm {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Point {
  double alpha = 0.0, f = 0.0, slope = 0.0;
  std::vector<double> x, g;
};

class LineSearch {
 public:
  LineSearch(const Objective& f, const std::vector<double>& x, double fx, const std::vector<double>& g,
             const std::vector<double>& p, const LbfgsOptions& o, std::size_t& evals)
      : f_(f), x_(x), p_(p), o_(o), evals_(evals), f0_(fx), d0_(dot(g, p)) {}

  /// Strong-Wolfe step; returns false when no acceptable point was found.
  bool run(double alpha0, Point& out) {
    Point prev{0.0, f0_, d0_, x_, {}};
    double alpha = alpha0;
    for (std::size_t i = 0; i < o_.max_line_search; ++i) {
      Point cur = eval(alpha);
      if (!std::isfinite(cur.f) || cur.f > f0_ + o_.c1 * alpha * d0_ || (i > 0 && cur.f >= prev.f)) {
        return zoom(prev, cur, out);
      }
      if (std::abs(cur.slope) <= -o_.c2 * d0_) {
        out = std::move(cur);
        return true;
      }
      if (cur.slope >= 0.0) return zoom(cur, prev, out);
      prev = std::move(cur);
      alpha *= 2.0;
    }
    return false;
  }

 private:
  Point eval(double alpha) {
    Point pt;
    pt.alpha = alpha;
    pt.x.resize(x_.size());
    pt.g.assign(x_.size(), 0.0);
    for (std::size_t i = 0; i < x_.size(); ++i) pt.x[i] = x_[i] + alpha * p_[i];
    pt.f = f_(pt.x, pt.g);
    pt.slope = dot(pt.g, p_);
    ++evals_;
    return pt;
  }

  bool zoom(Point lo, Point hi, Point& out) {
    for (std::size_t i = 0; i < o_.max_line_search; ++i) {
      const double a = interpolate(lo, hi);
      Point cur = eval(a);
      if (!std::isfinite(cur.f) || cur.f > f0_ + o_.c1 * a * d0_ || cur.f >= lo.f) {
        hi = std::move(cur);
      } else {
        if (std::abs(cur.slope) <= -o_.c2 * d0_) {
          out = std::move(cur);
          return true;
        }
        if (cur.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = std::move(cur);
      }
      if (std::abs(hi.alpha - lo.alpha) <= 1e-16 * std::max(1.0, lo.alpha)) break;
    }
    // Interval collapsed: accept the best sufficient-decrease point if it is strictly lower.
    if (lo.alpha > 0.0 && lo.f < f0_) {
      out = std::move(lo);
      return true;
    }
    return false;
  }

  /// Cubic minimizer between the bracket ends, kept inside the middle 80% of the interval.
  static double interpolate(const Point& lo, const Point& hi) {
    const double a = lo.alpha, b = hi.alpha;
    const double lower = std::min(a, b), upper = std::max(a, b), w = upper - lower;
    double t = 0.5 * (a + b);
    if (std::isfinite(hi.f)) {
      const double d1 = lo.slope + hi.slope - 3.0 * (lo.f - hi.f) / (a - b);
      const double disc = d1 * d1 - lo.slope * hi.slope;
      if (disc >= 0.0) {
        const double d2 = std::copysign(std::sqrt(disc), b - a);
        const double c = b - (b - a) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
        if (std::isfinite(c)) t = c;
      }
    }
    return std::clamp(t, lower + 0.1 * w, upper - 0.1 * w);
  }

  const Objective& f_;
  const std::vector<double>& x_;
  const std::vector<double>& p_;
  const LbfgsOptions& o_;
  std::size_t& evals_;
  double f0_, d0_;
};

}  // namespace

LbfgsResult lbfgs_minimize(const Objective& f, std::vector<double> x0, const LbfgsOptions& options) {
  if (options.history < 1) throw ContractError("L-BFGS history must be >= 1");
  LbfgsResult r;
  r.x = std::move(x0);
  std::vector<double> g(r.x.size(), 0.0);
  r.f = f(r.x, g);
  r.evaluations = 1;
  if (!std::isfinite(r.f)) throw NumericError("L-BFGS: objective is not finite at the starting point");
  r.objective_history.push_back(r.f);

  struct Pair {
    std::vector<double> s, y;
    double rho;
  };
  std::deque<Pair> memory;
  const std::size_t n = r.x.size();
  std::vector<double> p(n), alpha(options.history);

  for (r.iterations = 0; r.iterations < options.max_iterations; ++r.iterations) {
    double gmax = 0.0;
    for (const double v : g) gmax = std::max(gmax, std::abs(v));
    if (gmax <= options.gradient_tolerance) {
      r.converged = true;
      break;
    }
    // Two-loop recursion: p = −H g.
    std::vector<double> q = g;
    for (std::size_t k = memory.size(); k-- > 0;) {
      alpha[k] = memory[k].rho * dot(memory[k].s, q);
      for (std::size_t i = 0; i < n; ++i) q[i] -= alpha[k] * memory[k].y[i];
    }
    double gamma = 1.0;
    if (!memory.empty()) gamma = dot(memory.back().s, memory.back().y) / dot(memory.back().y, memory.back().y);
    for (std::size_t i = 0; i < n; ++i) q[i] *= gamma;
    for (std::size_t k = 0; k < memory.size(); ++k) {
      const double beta = memory[k].rho * dot(memory[k].y, q);
      for (std::size_t i = 0; i < n; ++i) q[i] += memory[k].s[i] * (alpha[k] - beta);
    }
    for (std::size_t i = 0; i < n; ++i) p[i] = -q[i];
    if (dot(p, g) >= 0.0) {
      memory.clear();
      for (std::size_t i = 0; i < n; ++i) p[i] = -g[i];
    }
    double step0 = 1.0;
    if (memory.empty()) step0 = std::min(1.0, 1.0 / std::sqrt(dot(g, g)));

    Point next;
    LineSearch ls(f, r.x, r.f, g, p, options, r.evaluations);
    if (!ls.run(step0, next)) break;

    Pair pr{std::vector<double>(n), std::vector<double>(n), 0.0};
    for (std::size_t i = 0; i < n; ++i) {
      pr.s[i] = next.x[i] - r.x[i];
      pr.y[i] = next.g[i] - g[i];
    }
    const double sy = dot(pr.s, pr.y);
    const double previous = r.f;
    r.x = std::move(next.x);
    g = std::move(next.g);
    r.f = next.f;
    r.objective_history.push_back(r.f);
    if (sy > 1e-12 * std::sqrt(dot(pr.s, pr.s) * dot(pr.y, pr.y))) {
      pr.rho = 1.0 / sy;
      memory.push_back(std::move(pr));
      if (memory.size() > options.history) memory.pop_front();
    }
    if (previous - r.f <= 1e-15 * std::max(1.0, std::abs(previous))) {
      ++r.iterations;
      r.converged = true;
      break;
    }
  }
  return r;
}

void LabeledSet::push_back(std::span<const double> x, std::size_t label) {
  if (dim == 0 && labels.empty()) dim = x.size();
  if (x.size() != dim) throw ShapeError("LabeledSet: feature width mismatch");
  features.insert(features.end(), x.begin(), x.end());
  labels.push_back(label);
}

std::size_t LogisticModel::predict(std::span<const double> x) const {
  std::size_t best = 0;
  double best_z = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < classes; ++c) {
    double z = bias[c];
    for (std::size_t j = 0; j < dim; ++j) z += weights[c * dim + j] * x[j];
    if (z > best_z) {
      best_z = z;
      best = c;
    }
  }
  return best;
}

double LogisticModel::weight_norm() const { return std::sqrt(dot(weights, weights)); }

double logistic_objective(const LabeledSet& data, std::size_t classes, double reg, std::span<const double> params,
                          std::span<double> grad) {
  const std::size_t d = data.dim, nw = classes * d;
  if (params.size() != nw + classes || grad.size() != params.size()) throw ShapeError("logistic: parameter size");
  std::fill(grad.begin(), grad.end(), 0.0);
  const std::size_t n = data.size();
  const double inv_n = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  std::vector<double> z(classes);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = data.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      z[c] = params[nw + c] + dot(params.subspan(c * d, d), x);
      mx = std::max(mx, z[c]);
    }
    double se = 0.0;
    for (std::size_t c = 0; c < classes; ++c) se += std::exp(z[c] - mx);
    const double lse = mx + std::log(se);
    const std::size_t y = data.labels[i];
    loss += lse - z[y];
    for (std::size_t c = 0; c < classes; ++c) {
      const double r = (std::exp(z[c] - lse) - (c == y ? 1.0 : 0.0)) * inv_n;
      for (std::size_t j = 0; j < d; ++j) grad[c * d + j] += r * x[j];
      grad[nw + c] += r;
    }
  }
  loss *= inv_n;
  double wsq = 0.0;
  for (std::size_t k = 0; k < nw; ++k) {
    wsq += params[k] * params[k];
    grad[k] += reg * params[k];
  }
  return loss + 0.5 * reg * wsq;
}

LogisticModel fit_logistic(const LabeledSet& data, std::size_t classes, double reg, const LbfgsOptions& options,
                           LbfgsResult* info) {
  if (classes < 1) throw ContractError("fit_logistic: no classes");
  for (const auto y : data.labels) {
    if (y >= classes) throw ContractError("fit_logistic: label out of range");
  }
  const std::size_t nw = classes * data.dim;
  auto res = lbfgs_minimize(
      [&](std::span<const double> x, std::span<double> g) { return logistic_objective(data, classes, reg, x, g); },
      std::vector<double>(nw + classes, 0.0), options);
  LogisticModel m;
  m.dim = data.dim;
  m.classes = classes;
  m.weights.assign(res.x.begin(), res.x.begin() + static_cast<std::ptrdiff_t>(nw));
  m.bias.assign(res.x.begin() + static_cast<std::ptrdiff_t>(nw), res.x.end());
  if (info) *info = std::move(res);
  return m;
}

double accuracy(const LogisticModel& model, const LabeledSet& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += model.predict(data.row(i)) == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> ProbeConfig::default_grid() {
  std::vector<double> g(96);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::pow(10.0, -6.0 + 12.0 * static_cast<double>(i) / 95.0);
  return g;
}

void ProbeConfig::validate() const {
  if (shots < 1) throw ConfigError("probe shots must be >= 1");
  if (reg_grid.empty()) throw ConfigError("probe regularization grid is empty");
  for (std::size_t i = 0; i < reg_grid.size(); ++i) {
    if (!(reg_grid[i] >= 0.0) || (i > 0 && !(reg_grid[i] > reg_grid[i - 1]))) {
      throw ConfigError("probe regularization grid must be non-negative and strictly increasing");
    }
  }
  if (max_iterations < 1) throw ConfigError("probe max_iterations must be >= 1");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in (0, 1)");
}

ProbeResult linear_probe(const LabeledSet& train, const LabeledSet& test, std::size_t classes,
                         const ProbeConfig& config) {
  config.validate();
  if (classes < 2) throw ConfigError("linear probe needs at least 2 classes");
  if (test.size() > 0 && test.dim != train.dim) throw ShapeError("linear probe: train/test feature widths differ");
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (train.labels[i] >= classes) throw ContractError("linear probe: train label out of range");
    by_class[train.labels[i]].push_back(i);
  }
  Rng rng(config.seed);
  LabeledSet shots;
  shots.dim = train.dim;
  for (std::size_t c = 0; c < classes; ++c) {
    if (by_class[c].empty()) throw ConfigError("class " + std::to_string(c) + " is missing from the probe train split");
    if (by_class[c].size() < config.shots) {
      throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                        " train examples, fewer than " + std::to_string(config.shots) + " shots");
    }
    rng.shuffle(by_class[c]);
    for (std::size_t k = 0; k < config.shots; ++k) shots.push_back(train.row(by_class[c][k]), c);
  }

  std::vector<std::size_t> order(shots.size());
  std::iota(order.begin(), order.end(), 0);
  Rng fold_rng(mix_seed(config.seed, 1));
  fold_rng.shuffle(order);
  const std::size_t held =
      shots.size() < 2 ? 0
                       : std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(config.holdout_fraction *
                                                                                        static_cast<double>(shots.size()))),
                                                 1, shots.size() - 1);
  LabeledSet fit, hold;
  fit.dim = hold.dim = shots.dim;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < held ? hold : fit).push_back(shots.row(order[i]), shots.labels[order[i]]);
  }
  if (held == 0) hold = shots;

  LbfgsOptions opt;
  opt.max_iterations = config.max_iterations;
  std::vector<double> scores(config.reg_grid.size());
  parallel_for(config.reg_grid.size(), [&](std::size_t i) {
    scores[i] = accuracy(fit_logistic(fit, classes, config.reg_grid[i], opt), hold);
  });
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] >= scores[best]) best = i;
  }

  ProbeResult r;
  r.chosen_reg = config.reg_grid[best];
  const LogisticModel model = fit_logistic(shots, classes, r.chosen_reg, opt);
  r.train_accuracy = accuracy(model, shots);
  r.test_accuracy = accuracy(model, test);
  r.train_examples = shots.size();
  return r;
}

}  // namespace upm
