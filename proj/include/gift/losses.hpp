#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "gift/checkpoint.hpp"
#include "gift/data.hpp"
#include "gift/schedule.hpp"

namespace gift {

struct Batch {
  Eigen::Matrix2Xd x0;
  std::vector<int> concept_ids;

  Eigen::Index size() const { return x0.cols(); }
};

Batch make_batch(std::span<const Sample> samples);
// Uniform draw with replacement.
Batch sample_batch(std::span<const Sample> pool, int size, Rng& rng);

enum class LossKind { prior, max, noise, immunize };
std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view s);
inline constexpr LossKind kAllLosses[] = {LossKind::prior, LossKind::max, LossKind::noise, LossKind::immunize};

struct LossValue {
  double value = 0.0;
  std::map<std::string, double> components;
};

inline constexpr double kVarianceFloor = 1e-12;

struct NoiseOptions {
  LayerSet layers = LayerSet::conditioning;
  bool per_channel = false;       // per-row statistics instead of one pooled (mu, var) per layer
  bool mean_over_layers = false;  // average instead of sum over layers
};

// Everything random inside one loss evaluation: timesteps, forward-process noise, and the
// standard normals that become representation-noising targets (mu + sigma * xi).
struct Draws {
  std::vector<int> t;
  Eigen::Matrix2Xd eps;
  std::vector<Eigen::MatrixXd> xi;
};

int traced_layer_count(const Arch& arch, LayerSet layers);

// Draw order: timesteps, then eps column-major, then xi layer by layer (noise / immunize only).
Draws draw_randomness(const Params& params, const Batch& batch, LossKind kind, const Schedule& schedule, Rng& rng,
                      const NoiseOptions& options = {});

// Mean over the batch of ||pred - eps||^2.
double denoising_error(const Eigen::Matrix2Xd& pred, const Eigen::Matrix2Xd& eps);

// mu + sigma * xi with mu, sigma^2 taken from z (pooled or per row); sigma^2 floored.
Eigen::MatrixXd noise_targets(const Eigen::MatrixXd& z, const Eigen::MatrixXd& xi, bool per_channel = false);
double noise_mse(const Eigen::MatrixXd& z, const Eigen::MatrixXd& target);

struct Evaluation {
  LossValue loss;
  Eigen::VectorXd grad;                  // empty unless requested
  std::vector<Eigen::MatrixXd> targets;  // noising targets actually used
};

// Evaluates one loss on fixed draws. Noising targets are constants w.r.t. differentiation;
// when `frozen_targets` is non-empty they are used verbatim instead of mu + sigma * xi.
Evaluation evaluate_loss(const Params& params, LossKind kind, const Batch& batch, const Draws& draws,
                         const Schedule& schedule, double beta, const NoiseOptions& options, bool with_grad,
                         std::span<const Eigen::MatrixXd> frozen_targets = {});

LossValue loss_prior(const Params& params, const Batch& batch, const Schedule& schedule, Rng& rng);
LossValue loss_max(const Params& params, const Batch& batch, const Schedule& schedule, Rng& rng);
LossValue loss_noise(const ActivationTrace<double>& trace, Rng& rng, const NoiseOptions& options = {});
LossValue loss_noise(const ActivationTrace<double>& trace, std::span<const Eigen::MatrixXd> targets,
                     bool mean_over_layers = false);
LossValue loss_immunize(const Params& params, const Batch& batch, const Schedule& schedule, double beta, Rng& rng,
                        const NoiseOptions& options = {});

Eigen::VectorXd gradient(const Params& params, LossKind kind, const Batch& batch, const Draws& draws,
                         const Schedule& schedule, double beta = 1.0, const NoiseOptions& options = {});
// The same gradient materialized only on psi_index (in psi_index order).
Eigen::VectorXd gradient_psi(const Params& params, LossKind kind, const Batch& batch, const Draws& draws,
                             const Schedule& schedule, double beta = 1.0, const NoiseOptions& options = {});

using Predictor =
    std::function<Eigen::Matrix2Xd(const Eigen::Matrix2Xd& x_t, std::span<const int> ids, std::span<const int> t)>;

Predictor model_predictor(const Params& params);

// Denoising loss of an arbitrary predictor on fixed draws.
double denoising_loss(const Predictor& predictor, const Batch& batch, const Draws& draws, const Schedule& schedule);

// Denoising loss with draws from Rng(seed); every sample is repeated `repeats` times.
double monte_carlo_denoise_loss(const Predictor& predictor, const Batch& batch, const Schedule& schedule,
                                std::uint64_t seed, int repeats = 4);

}  // namespace gift
