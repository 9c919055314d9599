#pragma once

// Central differences of a scalar function of a flat parameter vector.

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// |f(x+h) - 2 f(x) + f(x-h)| / h per coordinate; large where a kink lies within h.
inline std::vector<double> slope_jump(const std::function<double(const std::vector<double>&)>& f,
                                      std::vector<double> x, double h = 1e-5) {
  const double f0 = f(x);
  std::vector<double> j(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    j[i] = std::abs(fp - 2.0 * f0 + fm) / h;
  }
  return j;
}

}  // namespace oracle
