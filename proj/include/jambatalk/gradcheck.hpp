#pragma once

#include <functional>
#include <string>

#include "jambatalk/nn.hpp"
#include "jambatalk/tensor.hpp"

namespace jambatalk {

struct GradCheckResult {
  double max_error = 0.0;  // max |analytic - numeric| / max(1, |analytic|)
  std::string worst_key;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Central differences of a scalar f at x, compared with backward(). x is not
// modified. Reports; never asserts.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double step = 1e-5);

// Same check over model parameters. `loss` rebuilds the graph from the live
// parameter values; each parameter is perturbed in place and restored. At most
// `max_coords_per_tensor` coordinates (evenly spread) are probed per tensor;
// 0 probes all of them.
GradCheckResult finite_diff_check_params(const std::function<Tensor()>& loss,
                                         const ParamList& params, double step = 1e-5,
                                         std::size_t max_coords_per_tensor = 0);

}  // namespace jambatalk
