#pragma once

#include <cmath>
#include <span>
#include <string>

#include <Eigen/Core>

#include "gift/errors.hpp"

namespace gift {

// Linear-beta DDPM schedule. alpha_bar[t] is the product of alpha[0..t].
template <typename Scalar>
struct NoiseSchedule {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Vector beta;
  Vector alpha;
  Vector alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }

  void check_timestep(int t) const {
    if (t < 0 || t >= steps())
      throw ValidationError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
  }
};

using Schedule = NoiseSchedule<double>;

template <typename Scalar>
NoiseSchedule<Scalar> schedule_from_betas(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& beta) {
  if (beta.size() < 1) throw ValidationError("schedule needs at least one step");
  for (Eigen::Index t = 0; t < beta.size(); ++t)
    if (!(beta[t] > Scalar(0) && beta[t] < Scalar(1))) throw ValidationError("beta must lie in (0, 1)");
  NoiseSchedule<Scalar> s;
  s.beta = beta;
  s.alpha = Scalar(1) - beta.array();
  s.alpha_bar.resize(beta.size());
  Scalar running(1);
  for (Eigen::Index t = 0; t < beta.size(); ++t) {
    running *= s.alpha[t];
    s.alpha_bar[t] = running;
  }
  return s;
}

template <typename Scalar = double>
NoiseSchedule<Scalar> build_schedule(int steps, Scalar beta_start, Scalar beta_end) {
  if (steps < 1) throw ValidationError("schedule: T must be >= 1");
  if (!(beta_start > Scalar(0) && beta_start <= beta_end && beta_end < Scalar(1)))
    throw ValidationError("schedule: need 0 < beta_start <= beta_end < 1");
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> beta(steps);
  for (int t = 0; t < steps; ++t) {
    const Scalar frac = steps == 1 ? Scalar(0) : Scalar(t) / Scalar(steps - 1);
    beta[t] = beta_start + (beta_end - beta_start) * frac;
  }
  // Endpoints exactly, independent of rounding in the interpolation.
  beta[0] = beta_start;
  if (steps > 1) beta[steps - 1] = beta_end;
  return schedule_from_betas<Scalar>(beta);
}

// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps, for an explicit abar.
template <typename DerivedX, typename DerivedE>
auto q_sample_abar(const Eigen::MatrixBase<DerivedX>& x0, const Eigen::MatrixBase<DerivedE>& eps,
                   typename DerivedX::Scalar alpha_bar) {
  using std::sqrt;
  using Scalar = typename DerivedX::Scalar;
  return (sqrt(alpha_bar) * x0 + sqrt(Scalar(1) - alpha_bar) * eps).eval();
}

template <typename DerivedX, typename DerivedE, typename Scalar>
auto q_sample(const Eigen::MatrixBase<DerivedX>& x0, int t, const Eigen::MatrixBase<DerivedE>& eps,
              const NoiseSchedule<Scalar>& schedule) {
  schedule.check_timestep(t);
  return q_sample_abar(x0, eps, schedule.alpha_bar[t]);
}

// Column-wise forward process for a batch with per-column timesteps.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, Eigen::Dynamic> q_sample_batch(const Eigen::Matrix<Scalar, 2, Eigen::Dynamic>& x0,
                                                         std::span<const int> t,
                                                         const Eigen::Matrix<Scalar, 2, Eigen::Dynamic>& eps,
                                                         const NoiseSchedule<Scalar>& schedule) {
  if (static_cast<Eigen::Index>(t.size()) != x0.cols() || eps.cols() != x0.cols())
    throw ValidationError("q_sample_batch: shape mismatch");
  Eigen::Matrix<Scalar, 2, Eigen::Dynamic> xt(2, x0.cols());
  for (Eigen::Index b = 0; b < x0.cols(); ++b)
    xt.col(b) = q_sample(x0.col(b), t[static_cast<std::size_t>(b)], eps.col(b), schedule);
  return xt;
}

}  // namespace gift
