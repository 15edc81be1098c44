#include "jambatalk/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace jambatalk {

namespace {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step) {
  Tensor probe = Tensor::from(x.shape(), x.to_vector(), true);
  f(probe).backward();
  const std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    auto values = probe.mutable_data();
    const double saved = values[i];
    values[i] = saved + step;
    const double up = f(probe).item();
    values[i] = saved - step;
    const double down = f(probe).item();
    values[i] = saved;
    const double g = analytic.empty() ? 0.0 : analytic[i];
    worst = std::max(worst, relative_error(g, (up - down) / (2.0 * step)));
  }
  return worst;
}

GradCheckResult finite_diff_check_params(const std::function<Tensor()>& loss,
                                         const ParamList& params, double step,
                                         std::size_t max_coords_per_tensor) {
  for (auto p : params) p.tensor.zero_grad();
  loss().backward();

  GradCheckResult result;
  NoGradGuard no_grad;
  for (auto p : params) {
    Tensor t = p.tensor;
    const std::size_t n = t.numel();
    const std::vector<double> analytic =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                     : std::vector<double>(n, 0.0);
    const std::size_t probes =
        max_coords_per_tensor == 0 ? n : std::min(n, max_coords_per_tensor);
    for (std::size_t k = 0; k < probes; ++k) {
      const std::size_t i = probes == n ? k : (k * n) / probes + (n / probes) / 2;
      auto values = t.mutable_data();
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss().item();
      values[i] = saved - step;
      const double down = loss().item();
      values[i] = saved;
      const double err = relative_error(analytic[i], (up - down) / (2.0 * step));
      ++result.coordinates;
      if (err > result.max_error || result.worst_key.empty()) {
        if (err >= result.max_error) {
          result.max_error = err;
          result.worst_key = p.key;
          result.worst_index = i;
        }
      }
    }
    t.zero_grad();
  }
  return result;
}

}  // namespace jambatalk
