#include "gift/analysis.hpp"

#include <cmath>
#include <fstream>

#include "gift/format.hpp"

namespace gift {

GradCheckReport grad_check(const Objective& objective, const Eigen::VectorXd& x, double h, double tol,
                           std::span<const Eigen::Index> coords, std::string name) {
  if (!(h > 0.0)) throw ValidationError("grad_check: h must be positive");
  GradCheckReport r;
  r.name = std::move(name);
  r.h = h;
  r.tol = tol;
  const Eigen::VectorXd analytic = objective.gradient(x);
  if (analytic.size() != x.size()) throw ValidationError("grad_check: gradient size mismatch");
  Eigen::VectorXd probe = x;
  auto check = [&](Eigen::Index i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = objective.value(probe);
    probe[i] = orig - h;
    const double fm = objective.value(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("grad_check: non-finite loss at perturbed coordinate " + std::to_string(i));
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kRelativeErrorFloor});
    const double err = std::abs(analytic[i] - numeric) / denom;
    if (err > r.max_rel_error || r.worst_index < 0) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
    ++r.checked;
  };
  if (coords.empty()) {
    for (Eigen::Index i = 0; i < x.size(); ++i) check(i);
  } else {
    for (Eigen::Index i : coords) {
      if (i < 0 || i >= x.size()) throw ValidationError("grad_check: coordinate out of range");
      check(i);
    }
  }
  r.passed = r.max_rel_error < tol;
  return r;
}

Objective loss_objective(LossKind kind, const Params& params, const Batch& batch, const Schedule& schedule,
                         const Draws& draws, double beta, const NoiseOptions& options) {
  const std::vector<Eigen::MatrixXd> targets =
      evaluate_loss(params, kind, batch, draws, schedule, beta, options, false).targets;
  auto at = [params](const Eigen::VectorXd& theta) {
    Params p = params;
    p.theta = theta;
    return p;
  };
  Objective o;
  o.value = [=](const Eigen::VectorXd& theta) {
    return evaluate_loss(at(theta), kind, batch, draws, schedule, beta, options, false, targets).loss.value;
  };
  o.gradient = [=](const Eigen::VectorXd& theta) {
    return evaluate_loss(at(theta), kind, batch, draws, schedule, beta, options, true, targets).grad;
  };
  return o;
}

GradCheckReport grad_check(LossKind kind, const Params& params, const Batch& batch, const Schedule& schedule, double h,
                           double tol, Rng& rng, double beta, const NoiseOptions& options) {
  const Draws d = draw_randomness(params, batch, kind, schedule, rng, options);
  return grad_check(loss_objective(kind, params, batch, schedule, d, beta, options), params.theta, h, tol, {},
                    std::string(to_string(kind)));
}

std::string_view to_string(FdScheme scheme) { return scheme == FdScheme::central ? "central" : "forward"; }

FdScheme parse_fd_scheme(std::string_view s) {
  if (s == "central") return FdScheme::central;
  if (s == "forward") return FdScheme::forward;
  throw ValidationError("unknown finite-difference scheme '" + std::string(s) + "'");
}

Eigen::VectorXd directional_hvp(const GradFn& gradient, const Eigen::VectorXd& x, const Eigen::VectorXd& v, double step,
                                FdScheme scheme) {
  if (!(step > 0.0)) throw ValidationError("hvp: step must be positive");
  const double norm = v.norm();
  if (norm == 0.0) return Eigen::VectorXd::Zero(x.size());
  const Eigen::VectorXd u = v / norm;
  Eigen::VectorXd hv;
  if (scheme == FdScheme::central) {
    hv = (gradient(x + step * u) - gradient(x - step * u)) / (2.0 * step);
  } else {
    hv = (gradient(x + step * u) - gradient(x)) / step;
  }
  hv *= norm;
  if (!hv.allFinite()) throw NumericalError("hvp: non-finite result");
  return hv;
}

BilevelProblem model_bilevel(const Params& params, const Batch& safe, const Batch& malicious, const Schedule& schedule,
                             double beta, Rng& rng, const NoiseOptions& options) {
  const Draws ds = draw_randomness(params, safe, LossKind::prior, schedule, rng);
  const Draws dm = draw_randomness(params, malicious, LossKind::immunize, schedule, rng, options);
  auto at = [params](const Eigen::VectorXd& theta) {
    Params p = params;
    p.theta = theta;
    return p;
  };
  BilevelProblem b;
  b.psi = params.psi_index;
  b.prior_grad = [=](const Eigen::VectorXd& theta) {
    return evaluate_loss(at(theta), LossKind::prior, safe, ds, schedule, 0.0, {}, true).grad;
  };
  b.immunize_grad = [=](const Eigen::VectorXd& theta) {
    return evaluate_loss(at(theta), LossKind::immunize, malicious, dm, schedule, beta, options, true).grad;
  };
  return b;
}

BilevelProblem quadratic_problem(Eigen::Index n, Eigen::Index psi_size, std::uint64_t seed) {
  if (n < 1 || psi_size < 1 || psi_size > n) throw ValidationError("quadratic_problem: invalid sizes");
  Rng rng(seed);
  auto spd = [&] {
    const Eigen::MatrixXd m = standard_normal(n, n, rng);
    return Eigen::MatrixXd(m * m.transpose() / static_cast<double>(n) + Eigen::MatrixXd::Identity(n, n));
  };
  const Eigen::MatrixXd A = spd(), B = spd();
  const Eigen::VectorXd a = standard_normal(n, 1, rng), b = standard_normal(n, 1, rng);
  BilevelProblem p;
  p.prior_grad = [=](const Eigen::VectorXd& x) { return Eigen::VectorXd(A * x + a); };
  p.immunize_grad = [=](const Eigen::VectorXd& x) { return Eigen::VectorXd(B * x + b); };
  for (Eigen::Index i = n - psi_size; i < n; ++i) p.psi.push_back(i);
  return p;
}

std::string_view to_string(TaylorMode mode) { return mode == TaylorMode::full_theta ? "full_theta" : "psi_block"; }

TaylorMode parse_taylor_mode(std::string_view s) {
  if (s == "full_theta") return TaylorMode::full_theta;
  if (s == "psi_block") return TaylorMode::psi_block;
  throw ValidationError("unknown taylor mode '" + std::string(s) + "'");
}

std::string_view to_string(TaylorStatus status) { return status == TaylorStatus::fitted ? "fitted" : "exact"; }

double taylor_residual(const BilevelProblem& problem, const Eigen::VectorXd& theta, double alpha_p, double alpha_i,
                       const TaylorOptions& options) {
  if (!(alpha_p >= 0.0) || !(alpha_i >= 0.0)) throw ValidationError("taylor_residual: step sizes must be >= 0");
  if (!(options.fd_scale > 0.0)) throw ValidationError("taylor_residual: fd_scale must be positive");
  const Eigen::VectorXd g_p = problem.prior_grad(theta);
  Eigen::VectorXd d;
  if (options.mode == TaylorMode::full_theta) {
    d = g_p;
  } else {
    d = Eigen::VectorXd::Zero(theta.size());
    for (auto i : problem.psi) d[i] = g_p[i];
  }
  const Eigen::VectorXd psi = gather(theta, problem.psi);

  // Two-step path: inner step, then the outer gradient at the moved point.
  const Eigen::VectorXd moved = theta - alpha_p * d;
  const Eigen::VectorXd exact = gather(moved, problem.psi) - alpha_i * gather(problem.immunize_grad(moved), problem.psi);

  // Expansion around theta.
  const double step = options.fd_scale * (1.0 + psi.norm());
  const Eigen::VectorXd hd = directional_hvp(problem.immunize_grad, theta, d, step, options.scheme);
  const Eigen::VectorXd approx = (psi - alpha_p * gather(d, problem.psi)) -
                                 alpha_i * gather(problem.immunize_grad(theta), problem.psi) +
                                 alpha_p * alpha_i * gather(hd, problem.psi);
  const double r = (exact - approx).norm();
  if (!std::isfinite(r)) throw NumericalError("taylor_residual: non-finite residual");
  return r;
}

double fit_loglog_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("slope fit: need at least 2 paired points");
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw NumericalError("slope fit: non-positive value in log fit");
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double den = n * sxx - sx * sx;
  if (den == 0.0) throw ValidationError("slope fit: degenerate abscissae");
  return (n * sxy - sx * sy) / den;
}

TaylorProbe taylor_scaling(const BilevelProblem& problem, const Eigen::VectorXd& theta, std::vector<double> grid,
                           double alpha_i, const TaylorOptions& options) {
  if (grid.size() < 4) throw ValidationError("taylor_scaling: grid needs at least 4 points");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0)) throw ValidationError("taylor_scaling: grid values must be positive");
    if (i > 0 && !(grid[i] < grid[i - 1])) throw ValidationError("taylor_scaling: grid must be strictly decreasing");
  }
  if (!(alpha_i > 0.0)) throw ValidationError("taylor_scaling: alpha_i must be positive");
  TaylorProbe p;
  p.alpha_p_grid = std::move(grid);
  p.alpha_i = alpha_i;
  for (double a : p.alpha_p_grid) p.residual_norms.push_back(taylor_residual(problem, theta, a, alpha_i, options));
  const double largest = *std::max_element(p.residual_norms.begin(), p.residual_norms.end());
  if (largest < kTaylorNoiseFloor) {
    p.status = TaylorStatus::exact;
    return p;
  }
  for (double r : p.residual_norms)
    if (r == 0.0)
      throw NumericalError("taylor_scaling: residual is exactly 0 on a non-quadratic problem; suspicious");
  p.status = TaylorStatus::fitted;
  p.fitted_slope = fit_loglog_slope(p.alpha_p_grid, p.residual_norms);
  return p;
}

void write_taylor_csv(const TaylorProbe& probe, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "alpha_p,residual\n";
  for (std::size_t i = 0; i < probe.alpha_p_grid.size(); ++i)
    out << format_double(probe.alpha_p_grid[i]) << ',' << format_double(probe.residual_norms[i]) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace gift
