// Test-side reference implementations kept independent of the library code
// they check: central finite differences for gradients, quadrature and naive
// loops for values.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lumos/tape.hpp"

namespace oracle {

struct FdResult {
  double max_rel_err = 0.0;
  size_t n_checked = 0;
  std::string worst;
};

// Central differences against already-populated Param::grad. The forward
// callable must be deterministic (re-seed any rng inside it).
template <typename F>
FdResult fd_check_params(F&& forward, const std::vector<lumos::Param*>& params, double h = 1e-5) {
  FdResult res;
  for (lumos::Param* p : params) {
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      double old = p->value[i];
      p->value[i] = old + h;
      double fp = forward();
      p->value[i] = old - h;
      double fm = forward();
      p->value[i] = old;
      double fd = (fp - fm) / (2.0 * h);
      double ad = p->grad[i];
      double err = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      if (err > res.max_rel_err) {
        res.max_rel_err = err;
        res.worst = p->name + "[" + std::to_string(i) + "]";
      }
      ++res.n_checked;
    }
  }
  return res;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Trapezoidal estimate of E[f(u)] for u uniform on [lo,hi].
inline double uniform_expectation(const std::function<double(double)>& f, double lo, double hi,
                                  int steps = 200000) {
  double acc = 0.5 * (f(lo) + f(hi));
  double dx = (hi - lo) / steps;
  for (int i = 1; i < steps; ++i) acc += f(lo + i * dx);
  return acc * dx / (hi - lo);
}

}  // namespace oracle
