#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "gift/losses.hpp"

namespace gift {

using ValueFn = std::function<double(const Eigen::VectorXd&)>;
using GradFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct Objective {
  ValueFn value;
  GradFn gradient;
};

inline constexpr double kRelativeErrorFloor = 1e-6;

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;  // |analytic - numeric| / max(|analytic|, |numeric|, floor)
  Eigen::Index worst_index = -1;
  Eigen::Index checked = 0;
  double h = 0.0;
  double tol = 0.0;
  bool passed = false;  // max_rel_error < tol
};

// Central differences over `coords` (every coordinate when empty).
GradCheckReport grad_check(const Objective& objective, const Eigen::VectorXd& x, double h, double tol,
                           std::span<const Eigen::Index> coords = {}, std::string name = "");

// Objective over theta for one loss with every random draw fixed; noising targets are frozen at
// `params` so the value is a deterministic function the gradient can be compared against.
Objective loss_objective(LossKind kind, const Params& params, const Batch& batch, const Schedule& schedule,
                         const Draws& draws, double beta = 1.0, const NoiseOptions& options = {});

GradCheckReport grad_check(LossKind kind, const Params& params, const Batch& batch, const Schedule& schedule, double h,
                           double tol, Rng& rng, double beta = 1.0, const NoiseOptions& options = {});

enum class FdScheme { forward, central };
std::string_view to_string(FdScheme scheme);
FdScheme parse_fd_scheme(std::string_view s);

// H v by differencing the gradient along the unit vector v/|v| with step `step`.
Eigen::VectorXd directional_hvp(const GradFn& gradient, const Eigen::VectorXd& x, const Eigen::VectorXd& v, double step,
                                FdScheme scheme = FdScheme::central);

// Gradient fields of the two levels over the full parameter vector, and the psi coordinates.
struct BilevelProblem {
  GradFn prior_grad;
  GradFn immunize_grad;
  std::vector<Eigen::Index> psi;
};

// Gradient fields of L_prior on `safe` and L_immunize on `malicious`, with t, eps and xi drawn
// once from `rng` and reused at every evaluation point.
BilevelProblem model_bilevel(const Params& params, const Batch& safe, const Batch& malicious, const Schedule& schedule,
                             double beta, Rng& rng, const NoiseOptions& options = {});

// Quadratic levels with affine gradients; the expansion is exact for them.
BilevelProblem quadratic_problem(Eigen::Index n, Eigen::Index psi_size, std::uint64_t seed);

enum class TaylorMode { full_theta, psi_block };
std::string_view to_string(TaylorMode mode);
TaylorMode parse_taylor_mode(std::string_view s);

struct TaylorOptions {
  TaylorMode mode = TaylorMode::full_theta;  // direction of the inner step
  FdScheme scheme = FdScheme::central;
  double fd_scale = 1e-4;  // HVP step = fd_scale * (1 + |psi|)
};

// |psi''_exact - psi''_approx| where psi''_exact comes from an inner step followed by an outer
// step and psi''_approx from the first-order expansion with the curvature correction
// alpha_p * alpha_i * H_I grad_P.
double taylor_residual(const BilevelProblem& problem, const Eigen::VectorXd& theta, double alpha_p, double alpha_i,
                       const TaylorOptions& options = {});

inline constexpr double kTaylorNoiseFloor = 1e-9;

enum class TaylorStatus { fitted, exact };
std::string_view to_string(TaylorStatus status);

struct TaylorProbe {
  std::vector<double> alpha_p_grid;
  double alpha_i = 0.0;
  std::vector<double> residual_norms;
  std::optional<double> fitted_slope;  // absent when every residual is at the noise floor
  TaylorStatus status = TaylorStatus::fitted;
};

// Residuals over a strictly decreasing grid (at least 4 points) and the least-squares slope of
// log residual against log alpha_p.
TaylorProbe taylor_scaling(const BilevelProblem& problem, const Eigen::VectorXd& theta, std::vector<double> grid,
                           double alpha_i, const TaylorOptions& options = {});

double fit_loglog_slope(std::span<const double> x, std::span<const double> y);

// Columns: alpha_p, residual.
void write_taylor_csv(const TaylorProbe& probe, const std::filesystem::path& path);

}  // namespace gift
