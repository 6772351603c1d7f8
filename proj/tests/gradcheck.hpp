#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "graftnet/autodiff.hpp"
#include "graftnet/rng.hpp"

namespace graftnet::testing {

using Vd = ad::Value<double>;

inline Vd random_param(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<double> data(ad::shape_size(shape));
  for (auto& x : data) x = rng.uniform(-scale, scale);
  return Vd::parameter(std::move(shape), std::move(data));
}

inline Vd random_const(Rng& rng, ad::Shape shape, double scale = 1.0) {
  std::vector<double> data(ad::shape_size(shape));
  for (auto& x : data) x = rng.uniform(-scale, scale);
  return Vd::constant(std::move(shape), std::move(data));
}

/// ||analytic - numeric|| / max(||analytic||, ||numeric||), per tensor.
/// Returns the worst ratio across tensors (0 when both gradients vanish).
inline double gradient_error(const std::function<Vd()>& loss_fn, std::vector<Vd> params,
                             double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  auto loss = loss_fn();
  ad::backward(loss);
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.grad().begin(), p.grad().end());
    analytic.resize(p.size(), 0.0);
    std::vector<double> numeric(p.size());
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn().item();
      data[i] = saved - h;
      const double down = loss_fn().item();
      data[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::sqrt(std::max(na, nn));
    if (denom < 1e-12) continue;
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

}  // namespace graftnet::testing
