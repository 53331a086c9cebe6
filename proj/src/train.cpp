#include "gift/train.hpp"

#include <algorithm>
#include <cmath>

namespace gift {

void AdamState::apply(Eigen::VectorXd& x, const Eigen::VectorXd& grad) {
  if (m.size() != x.size()) {
    m = Eigen::VectorXd::Zero(x.size());
    v = Eigen::VectorXd::Zero(x.size());
  }
  ++step;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

void validate(const PretrainConfig& c) {
  if (c.steps < 0) throw ValidationError("pretrain: steps must be >= 0");
  if (!(c.lr > 0.0)) throw ValidationError("pretrain: lr must be positive");
  if (c.batch_size < 1) throw ValidationError("pretrain: batch_size must be positive");
}

Params pretrain(const Params& init, const ConceptDataset& dataset, const Schedule& schedule,
                const PretrainConfig& config, std::vector<double>* losses) {
  validate(config);
  std::vector<Sample> pool = split_view_excluding(dataset, Split::D_S, config.excluded_concepts);
  if (config.include_malicious) {
    for (const Sample& s : split_view(dataset, Split::D_M))
      if (std::find(config.excluded_concepts.begin(), config.excluded_concepts.end(), s.concept_id) ==
          config.excluded_concepts.end())
        pool.push_back(s);
  }
  if (pool.empty()) throw ValidationError("pretrain: no training samples");
  Params p = init;
  AdamState adam;
  adam.lr = config.lr;
  Rng rng(config.seed);
  for (int step = 0; step < config.steps; ++step) {
    const Batch b = sample_batch(pool, config.batch_size, rng);
    const Draws d = draw_randomness(p, b, LossKind::prior, schedule, rng);
    const Evaluation ev = evaluate_loss(p, LossKind::prior, b, d, schedule, 0.0, {}, true);
    if (!ev.grad.allFinite()) throw NumericalError("pretrain: non-finite gradient at step " + std::to_string(step));
    adam.apply(p.theta, ev.grad);
    if (losses) losses->push_back(ev.loss.value);
  }
  return p;
}

}  // namespace gift
