#pragma once

// Brute-force flat-kernel mean shift with the library's seeding, stopping
// and merge rules, written without any of its code.

#include <cmath>
#include <map>
#include <vector>

namespace oracle {

struct MeanShiftOut {
  std::vector<std::vector<double>> modes;
  std::vector<int> labels;
};

inline double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline MeanShiftOut mean_shift(const std::vector<std::vector<double>>& pts, double bw, double eps = 1e-4,
                               int max_iter = 300) {
  const std::size_t n = pts.size(), d = pts[0].size();
  // One seed per occupied bin: its lowest-index point.
  std::map<std::vector<long long>, std::size_t> first;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long long> key;
    for (double x : pts[i]) key.push_back(static_cast<long long>(std::floor(x / bw)));
    first.emplace(key, i);  // keeps the earliest insertion
  }
  std::vector<std::size_t> seeds;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<long long> key;
    for (double x : pts[i]) key.push_back(static_cast<long long>(std::floor(x / bw)));
    if (first.at(key) == i) seeds.push_back(i);
  }
  struct Mode {
    std::vector<double> x;
    std::size_t support;
  };
  std::vector<Mode> found;
  for (std::size_t s : seeds) {
    std::vector<double> x = pts[s];
    for (int it = 0; it < max_iter; ++it) {
      std::vector<double> m(d, 0.0);
      std::size_t c = 0;
      for (const auto& p : pts) {
        if (dist2(p, x) <= bw * bw) {
          for (std::size_t k = 0; k < d; ++k) m[k] += p[k];
          ++c;
        }
      }
      for (double& v : m) v /= static_cast<double>(c);
      const double shift = std::sqrt(dist2(m, x));
      x = m;
      if (shift <= eps * bw) break;
    }
    std::size_t support = 0;
    for (const auto& p : pts) support += dist2(p, x) <= bw * bw;
    found.push_back({x, support});
  }
  // Keep modes in order of support (earlier seed wins ties) unless within bw/2 of a kept one.
  std::vector<bool> taken(found.size(), false);
  MeanShiftOut out;
  for (std::size_t round = 0; round < found.size(); ++round) {
    std::size_t best = found.size();
    for (std::size_t k = 0; k < found.size(); ++k) {
      if (taken[k]) continue;
      if (best == found.size() || found[k].support > found[best].support) best = k;
    }
    taken[best] = true;
    bool near = false;
    for (const auto& m : out.modes) near = near || std::sqrt(dist2(m, found[best].x)) <= bw / 2;
    if (!near) out.modes.push_back(found[best].x);
  }
  for (const auto& p : pts) {
    int arg = 0;
    for (std::size_t m = 1; m < out.modes.size(); ++m)
      if (dist2(p, out.modes[m]) < dist2(p, out.modes[arg])) arg = static_cast<int>(m);
    out.labels.push_back(arg);
  }
  return out;
}

}  // namespace oracle
