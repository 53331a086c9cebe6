#include "gift/losses.hpp"

#include <array>
#include <cmath>

namespace gift {

Batch make_batch(std::span<const Sample> samples) {
  Batch b;
  b.x0 = stack_points(samples);
  b.concept_ids.reserve(samples.size());
  for (const auto& s : samples) b.concept_ids.push_back(s.concept_id);
  return b;
}

Batch sample_batch(std::span<const Sample> pool, int size, Rng& rng) {
  if (pool.empty()) throw ValidationError("sample_batch: empty pool");
  if (size < 1) throw ValidationError("sample_batch: batch size must be positive");
  Batch b;
  b.x0.resize(2, size);
  b.concept_ids.resize(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) {
    const auto& s = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size())))];
    b.x0.col(i) = s.x;
    b.concept_ids[static_cast<std::size_t>(i)] = s.concept_id;
  }
  return b;
}

namespace {
constexpr std::array<std::pair<std::string_view, LossKind>, 4> kLossNames{{
    {"prior", LossKind::prior},
    {"max", LossKind::max},
    {"noise", LossKind::noise},
    {"immunize", LossKind::immunize},
}};

bool uses_noise(LossKind k) { return k == LossKind::noise || k == LossKind::immunize; }
}  // namespace

std::string_view to_string(LossKind kind) {
  for (const auto& [n, k] : kLossNames)
    if (k == kind) return n;
  return "?";
}

LossKind parse_loss_kind(std::string_view s) {
  for (const auto& [n, k] : kLossNames)
    if (n == s) return k;
  throw ValidationError("unknown loss selector '" + std::string(s) + "'");
}

int traced_layer_count(const Arch& arch, LayerSet layers) {
  return layers == LayerSet::all ? arch.trunk_blocks + arch.cond_blocks : arch.cond_blocks;
}

Draws draw_randomness(const Params& params, const Batch& batch, LossKind kind, const Schedule& schedule, Rng& rng,
                      const NoiseOptions& options) {
  if (batch.size() == 0) throw ValidationError("loss: empty batch");
  Draws d;
  d.t.resize(static_cast<std::size_t>(batch.size()));
  for (auto& t : d.t) t = uniform_int(rng, 0, schedule.steps());
  d.eps = standard_normal(2, batch.size(), rng);
  if (uses_noise(kind)) {
    const int n = traced_layer_count(params.arch, options.layers);
    for (int j = 0; j < n; ++j) d.xi.push_back(standard_normal(params.arch.width, batch.size(), rng));
  }
  return d;
}

double denoising_error(const Eigen::Matrix2Xd& pred, const Eigen::Matrix2Xd& eps) {
  if (pred.cols() != eps.cols() || pred.cols() == 0) throw ValidationError("denoising_error: shape mismatch");
  return (pred - eps).colwise().squaredNorm().mean();
}

Eigen::MatrixXd noise_targets(const Eigen::MatrixXd& z, const Eigen::MatrixXd& xi, bool per_channel) {
  if (z.size() < 2) throw ValidationError("noise loss: layer has fewer than 2 elements, variance undefined");
  if (z.rows() != xi.rows() || z.cols() != xi.cols()) throw ValidationError("noise loss: target shape mismatch");
  if (!per_channel) {
    const double mu = z.mean();
    const double var = std::max((z.array() - mu).square().mean(), kVarianceFloor);
    return (mu + std::sqrt(var) * xi.array()).matrix();
  }
  if (z.cols() < 2) throw ValidationError("noise loss: per-channel statistics need at least 2 samples");
  const Eigen::VectorXd mu = z.rowwise().mean();
  const Eigen::VectorXd sd =
      (z.colwise() - mu).array().square().rowwise().mean().max(kVarianceFloor).sqrt().matrix();
  return ((xi.array().colwise() * sd.array()).colwise() + mu.array()).matrix();
}

double noise_mse(const Eigen::MatrixXd& z, const Eigen::MatrixXd& target) {
  if (z.rows() != target.rows() || z.cols() != target.cols()) throw ValidationError("noise_mse: shape mismatch");
  return (z - target).squaredNorm() / static_cast<double>(z.size());
}

Evaluation evaluate_loss(const Params& params, LossKind kind, const Batch& batch, const Draws& draws,
                         const Schedule& schedule, double beta, const NoiseOptions& options, bool with_grad,
                         std::span<const Eigen::MatrixXd> frozen_targets) {
  const auto n = batch.size();
  if (n == 0) throw ValidationError("loss: empty batch");
  if (static_cast<Eigen::Index>(draws.t.size()) != n || draws.eps.cols() != n)
    throw ValidationError("loss: draws do not match batch");
  const bool noise = uses_noise(kind);
  if (noise && frozen_targets.empty() && draws.xi.empty()) throw ValidationError("loss: noising draws missing");

  const Eigen::Matrix2Xd xt = q_sample_batch<double>(batch.x0, draws.t, draws.eps, schedule);
  ActivationTrace<double> trace;
  ForwardTape<double> tape;
  const Eigen::Matrix2Xd pred =
      forward(params, xt, batch.concept_ids, draws.t, noise ? &trace : nullptr, with_grad ? &tape : nullptr,
              options.layers);

  Evaluation ev;
  double denoise = 0.0;
  if (kind != LossKind::noise) denoise = denoising_error(pred, draws.eps);

  double noise_value = 0.0;
  std::vector<Eigen::MatrixXd> d_trace;
  if (noise) {
    const auto layers = trace.layers.size();
    if (!frozen_targets.empty() && frozen_targets.size() != layers)
      throw ValidationError("loss: frozen target count mismatch");
    if (frozen_targets.empty() && draws.xi.size() != layers) throw ValidationError("loss: noising draw count mismatch");
    const double layer_weight = options.mean_over_layers ? 1.0 / static_cast<double>(layers) : 1.0;
    for (std::size_t j = 0; j < layers; ++j) {
      const Eigen::MatrixXd& z = trace.layers[j].z;
      Eigen::MatrixXd target =
          frozen_targets.empty() ? noise_targets(z, draws.xi[j], options.per_channel) : frozen_targets[j];
      noise_value += layer_weight * noise_mse(z, target);
      if (with_grad) d_trace.push_back(layer_weight * 2.0 / static_cast<double>(z.size()) * (z - target));
      ev.targets.push_back(std::move(target));
    }
  }

  switch (kind) {
    case LossKind::prior:
      ev.loss.value = denoise;
      ev.loss.components["prior"] = denoise;
      break;
    case LossKind::max:
      ev.loss.value = -denoise;
      ev.loss.components["max"] = -denoise;
      break;
    case LossKind::noise:
      ev.loss.value = noise_value;
      ev.loss.components["noise"] = noise_value;
      break;
    case LossKind::immunize:
      ev.loss.value = -denoise + beta * noise_value;
      ev.loss.components["max"] = -denoise;
      ev.loss.components["noise"] = noise_value;
      break;
  }

  if (with_grad) {
    Eigen::Matrix2Xd d_pred = Eigen::Matrix2Xd::Zero(2, n);
    const double scale = 2.0 / static_cast<double>(n);
    if (kind == LossKind::prior) d_pred = scale * (pred - draws.eps);
    if (kind == LossKind::max || kind == LossKind::immunize) d_pred = -scale * (pred - draws.eps);
    if (kind == LossKind::immunize)
      for (auto& d : d_trace) d *= beta;
    ev.grad = backward<double>(params, tape, d_pred, d_trace, options.layers);
  }
  return ev;
}

LossValue loss_prior(const Params& params, const Batch& batch, const Schedule& schedule, Rng& rng) {
  const Draws d = draw_randomness(params, batch, LossKind::prior, schedule, rng);
  return evaluate_loss(params, LossKind::prior, batch, d, schedule, 0.0, {}, false).loss;
}

LossValue loss_max(const Params& params, const Batch& batch, const Schedule& schedule, Rng& rng) {
  const Draws d = draw_randomness(params, batch, LossKind::max, schedule, rng);
  return evaluate_loss(params, LossKind::max, batch, d, schedule, 0.0, {}, false).loss;
}

LossValue loss_noise(const ActivationTrace<double>& trace, std::span<const Eigen::MatrixXd> targets,
                     bool mean_over_layers) {
  if (trace.layers.empty()) throw ValidationError("loss_noise: empty trace");
  if (targets.size() != trace.layers.size()) throw ValidationError("loss_noise: target count mismatch");
  double total = 0.0;
  for (std::size_t j = 0; j < trace.layers.size(); ++j) total += noise_mse(trace.layers[j].z, targets[j]);
  if (mean_over_layers) total /= static_cast<double>(trace.layers.size());
  return {total, {{"noise", total}}};
}

LossValue loss_noise(const ActivationTrace<double>& trace, Rng& rng, const NoiseOptions& options) {
  if (trace.layers.empty()) throw ValidationError("loss_noise: empty trace");
  std::vector<Eigen::MatrixXd> targets;
  for (const auto& layer : trace.layers) {
    if (layer.z.size() < 2) throw ValidationError("noise loss: layer has fewer than 2 elements, variance undefined");
    const Eigen::MatrixXd xi = standard_normal(layer.z.rows(), layer.z.cols(), rng);
    targets.push_back(noise_targets(layer.z, xi, options.per_channel));
  }
  return loss_noise(trace, targets, options.mean_over_layers);
}

LossValue loss_immunize(const Params& params, const Batch& batch, const Schedule& schedule, double beta, Rng& rng,
                        const NoiseOptions& options) {
  if (beta < 0.0) throw ValidationError("loss_immunize: beta must be >= 0");
  const Draws d = draw_randomness(params, batch, LossKind::immunize, schedule, rng, options);
  return evaluate_loss(params, LossKind::immunize, batch, d, schedule, beta, options, false).loss;
}

Eigen::VectorXd gradient(const Params& params, LossKind kind, const Batch& batch, const Draws& draws,
                         const Schedule& schedule, double beta, const NoiseOptions& options) {
  return evaluate_loss(params, kind, batch, draws, schedule, beta, options, true).grad;
}

Eigen::VectorXd gradient_psi(const Params& params, LossKind kind, const Batch& batch, const Draws& draws,
                             const Schedule& schedule, double beta, const NoiseOptions& options) {
  return gather<double>(gradient(params, kind, batch, draws, schedule, beta, options), params.psi_index);
}

Predictor model_predictor(const Params& params) {
  return [&params](const Eigen::Matrix2Xd& xt, std::span<const int> ids, std::span<const int> t) {
    return Eigen::Matrix2Xd(forward(params, xt, ids, t));
  };
}

double denoising_loss(const Predictor& predictor, const Batch& batch, const Draws& draws, const Schedule& schedule) {
  if (batch.size() == 0) throw ValidationError("denoising_loss: empty batch");
  const Eigen::Matrix2Xd xt = q_sample_batch<double>(batch.x0, draws.t, draws.eps, schedule);
  return denoising_error(predictor(xt, batch.concept_ids, draws.t), draws.eps);
}

double monte_carlo_denoise_loss(const Predictor& predictor, const Batch& batch, const Schedule& schedule,
                                std::uint64_t seed, int repeats) {
  if (batch.size() == 0) throw ValidationError("denoise loss: empty selection");
  if (repeats < 1) throw ValidationError("denoise loss: repeats must be positive");
  Batch tiled;
  tiled.x0 = batch.x0.replicate(1, repeats);
  for (int r = 0; r < repeats; ++r) tiled.concept_ids.insert(tiled.concept_ids.end(), batch.concept_ids.begin(), batch.concept_ids.end());
  Rng rng(seed);
  Draws d;
  d.t.resize(static_cast<std::size_t>(tiled.size()));
  for (auto& t : d.t) t = uniform_int(rng, 0, schedule.steps());
  d.eps = standard_normal(2, tiled.size(), rng);
  return denoising_loss(predictor, tiled, d, schedule);
}

}  // namespace gift
