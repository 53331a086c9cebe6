#pragma once

#include <cmath>
#include <functional>

#include <Eigen/Core>

#include "gift/data.hpp"
#include "gift/denoiser.hpp"

namespace gift::testing {

// A model small enough for exhaustive finite-difference checks (~280 parameters).
inline Arch tiny_arch() {
  Arch a;
  a.width = 8;
  a.trunk_blocks = 1;
  a.cond_blocks = 1;
  a.embed_dim = 4;
  a.attn_dim = 4;
  a.time_dim = 4;
  return a;
}

inline Arch small_arch() {
  Arch a;
  a.width = 8;
  a.trunk_blocks = 2;
  a.cond_blocks = 2;
  a.embed_dim = 4;
  a.attn_dim = 4;
  a.time_dim = 4;
  return a;
}

// Central differences over every coordinate, independent of any library gradient code.
inline Eigen::VectorXd central_differences(const std::function<double(const Eigen::VectorXd&)>& f,
                                           Eigen::VectorXd x, double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double max_relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline std::vector<Concept> three_concepts() {
  Concept mal{0, "blob", Family::gaussian_blobs, {0.0, 0.5, {2.0, 0.0}}, Role::malicious};
  Concept ring{1, "ring", Family::ring, {0.0, 1.0, {-2.0, 0.0}}, Role::safe};
  Concept moons{2, "moons", Family::two_moons, {0.0, 0.8, {0.0, 2.0}}, Role::safe};
  return {mal, ring, moons};
}

}  // namespace gift::testing
