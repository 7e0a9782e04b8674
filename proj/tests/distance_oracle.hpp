#pragma once

// Direct transcription of the centroid distance formulas, kept separate from
// the library implementation. Rows are plain vectors; labels parallel rows.

#include <cmath>
#include <set>
#include <vector>

namespace doprompt::testing {

using Rows = std::vector<std::vector<double>>;

inline double oracle_cos(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline std::vector<double> oracle_cent(const Rows& d) {
  std::vector<double> c(d[0].size(), 0.0);
  for (const auto& x : d)
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += x[i] / static_cast<double>(d.size());
  return c;
}

inline double oracle_in(const Rows& d) {
  const auto c = oracle_cent(d);
  double s = 0.0;
  for (const auto& x : d) s += oracle_cos(x, c);
  return s / static_cast<double>(d.size());
}

inline double oracle_dist(const Rows& a, const Rows& b) {
  return oracle_cos(oracle_cent(a), oracle_cent(b)) / (0.5 * (oracle_in(a) + oracle_in(b)));
}

/// Mean of oracle_dist over the classes present in both domains.
inline double oracle_class_dist(const Rows& a, const std::vector<int>& la, const Rows& b,
                                const std::vector<int>& lb) {
  std::set<int> classes(la.begin(), la.end());
  double s = 0.0;
  int n = 0;
  for (int c : classes) {
    Rows ac, bc;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (la[i] == c) ac.push_back(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i)
      if (lb[i] == c) bc.push_back(b[i]);
    if (ac.size() < 2 || bc.size() < 2) continue;
    s += oracle_dist(ac, bc);
    ++n;
  }
  return s / n;
}

}  // namespace doprompt::testing
