#include "upm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "upm/error.hpp"
#include "upm/rng.hpp"

namespace upm {

namespace {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

double central_difference(const std::function<Tensor()>& f, std::span<double> values,
                          std::size_t i, double h) {
  NoGradGuard no_grad;
  const double saved = values[i];
  values[i] = saved + h;
  const double plus = f().item();
  values[i] = saved - h;
  const double minus = f().item();
  values[i] = saved;
  return (plus - minus) / (2.0 * h);
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: h must be > 0");
  Tensor probe(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  return finite_diff_check([&] { return f(probe); }, {{"x", probe}}, h).max_rel_error;
}

GradCheckReport finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<NamedTensor>& params, double h,
                                  double fraction, std::uint64_t seed) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: h must be > 0");
  std::vector<Tensor> handles;
  for (const auto& p : params) {
    handles.push_back(p.tensor);
    handles.back().zero_grad();
  }
  const Tensor root = f();
  backward(root);

  GradCheckReport report;
  Rng rng(seed);
  for (std::size_t k = 0; k < handles.size(); ++k) {
    Tensor& t = handles[k];
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (fraction < 1.0) {
      rng.shuffle(coords);
      const auto keep = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(coords.size()))));
      coords.resize(std::min(keep, coords.size()));
      std::sort(coords.begin(), coords.end());
    }
    auto values = t.mutable_data();
    for (const auto i : coords) {
      const double numeric = central_difference(f, values, i, h);
      const double err = relative_error(analytic[i], numeric);
      ++report.coordinates_checked;
      if (err > report.max_rel_error || report.coordinates_checked == 1) {
        report.max_rel_error = err;
        report.worst_parameter = params[k].name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace upm
