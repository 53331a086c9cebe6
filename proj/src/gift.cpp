#include "gift/gift.hpp"

#include <fstream>

#include "gift/format.hpp"

namespace gift {

void validate(const GiftConfig& c) {
  if (!(c.alpha_inner >= 0.0) || !(c.alpha_outer >= 0.0)) throw ValidationError("gift: step sizes must be >= 0");
  if (!(c.beta >= 0.0)) throw ValidationError("gift: beta must be >= 0");
  if (c.inner_steps < 0 || c.outer_steps < 0 || c.inner_steps + c.outer_steps < 1)
    throw ValidationError("gift: interleave needs inner_steps + outer_steps >= 1");
  if (c.total_iterations < 0) throw ValidationError("gift: total_iterations must be >= 0");
  if (c.batch_size < 1) throw ValidationError("gift: batch_size must be positive");
  if (c.checkpoint_every < 1) throw ValidationError("gift: checkpoint_every must be positive");
}

std::string_view to_string(Level level) {
  switch (level) {
    case Level::inner:
      return "inner";
    case Level::outer:
      return "outer";
    case Level::naive:
      return "naive";
  }
  return "?";
}

namespace {

void require_finite(const Eigen::VectorXd& g, std::string_view what) {
  if (!g.allFinite()) throw NumericalError(std::string(what) + ": non-finite gradient");
}

struct Pools {
  std::vector<Sample> safe;
  std::vector<Sample> malicious;
};

Pools make_pools(const ConceptDataset& dataset, const GiftConfig& config) {
  Pools p{split_view_excluding(dataset, Split::D_S, config.excluded_safe_concepts), split_view(dataset, Split::D_M)};
  if (p.safe.empty()) throw ValidationError("immunize: D_S is empty");
  if (p.malicious.empty()) throw ValidationError("immunize: D_M is empty");
  return p;
}

template <typename Step>
std::pair<Params, ImmunizationRun> run_loop(const Params& params, const GiftConfig& config, Step&& step) {
  validate(config);
  ImmunizationRun run;
  run.config = config;
  Params current = params;
  for (int it = 0; it < config.total_iterations; ++it) {
    try {
      HistoryRecord rec = step(current, it);
      rec.iteration = it;
      run.history.push_back(rec);
    } catch (const NumericalError& e) {
      throw ImmunizationAborted("iteration " + std::to_string(it) + ": " + e.what(), std::move(run), current);
    }
    if ((it + 1) % config.checkpoint_every == 0) run.checkpoints.emplace_back(it + 1, current);
  }
  return {std::move(current), std::move(run)};
}

}  // namespace

Params inner_step(const Params& params, const Batch& safe_batch, const Schedule& schedule, double alpha_inner,
                  Rng& rng, LossValue* loss) {
  const Draws d = draw_randomness(params, safe_batch, LossKind::prior, schedule, rng);
  Evaluation ev = evaluate_loss(params, LossKind::prior, safe_batch, d, schedule, 0.0, {}, true);
  require_finite(ev.grad, "inner_step");
  Params out = params;
  out.theta -= alpha_inner * ev.grad;
  if (loss) *loss = ev.loss;
  return out;
}

Params outer_step(const Params& params, const Batch& malicious_batch, const Schedule& schedule, double alpha_outer,
                  double beta, Rng& rng, const NoiseOptions& noise, LossValue* loss) {
  const Draws d = draw_randomness(params, malicious_batch, LossKind::immunize, schedule, rng, noise);
  Evaluation ev = evaluate_loss(params, LossKind::immunize, malicious_batch, d, schedule, beta, noise, true);
  require_finite(ev.grad, "outer_step");
  Params out = params;
  for (Eigen::Index i : params.psi_index) out.theta[i] -= alpha_outer * ev.grad[i];
  if (loss) *loss = ev.loss;
  return out;
}

std::pair<Params, ImmunizationRun> immunize(const Params& params, const ConceptDataset& dataset,
                                            const Schedule& schedule, const GiftConfig& config) {
  validate(config);
  const Pools pools = make_pools(dataset, config);
  Rng rng(config.seed);
  const int cycle = config.inner_steps + config.outer_steps;
  return run_loop(params, config, [&](Params& p, int it) {
    HistoryRecord rec;
    LossValue lv;
    if (it % cycle < config.inner_steps) {
      const Batch b = sample_batch(pools.safe, config.batch_size, rng);
      p = inner_step(p, b, schedule, config.alpha_inner, rng, &lv);
      rec.level = Level::inner;
      rec.prior = lv.value;
    } else {
      const Batch b = sample_batch(pools.malicious, config.batch_size, rng);
      p = outer_step(p, b, schedule, config.alpha_outer, config.beta, rng, config.noise, &lv);
      rec.level = Level::outer;
      rec.max = lv.components.at("max");
      rec.noise = lv.components.at("noise");
    }
    rec.total = lv.value;
    return rec;
  });
}

std::pair<Params, ImmunizationRun> immunize_naive(const Params& params, const ConceptDataset& dataset,
                                                  const Schedule& schedule, const GiftConfig& config) {
  validate(config);
  const Pools pools = make_pools(dataset, config);
  Rng rng(config.seed);
  return run_loop(params, config, [&](Params& p, int) {
    const Batch safe = sample_batch(pools.safe, config.batch_size, rng);
    const Draws ds = draw_randomness(p, safe, LossKind::prior, schedule, rng);
    const Batch mal = sample_batch(pools.malicious, config.batch_size, rng);
    const Draws dm = draw_randomness(p, mal, LossKind::immunize, schedule, rng, config.noise);
    const Evaluation prior = evaluate_loss(p, LossKind::prior, safe, ds, schedule, 0.0, {}, true);
    const Evaluation imm = evaluate_loss(p, LossKind::immunize, mal, dm, schedule, config.beta, config.noise, true);
    require_finite(prior.grad, "immunize_naive");
    require_finite(imm.grad, "immunize_naive");
    Eigen::VectorXd theta = p.theta - config.alpha_inner * prior.grad;
    for (Eigen::Index i : p.psi_index) theta[i] -= config.alpha_outer * imm.grad[i];
    p.theta = std::move(theta);
    HistoryRecord rec;
    rec.level = Level::naive;
    rec.prior = prior.loss.value;
    rec.max = imm.loss.components.at("max");
    rec.noise = imm.loss.components.at("noise");
    rec.total = prior.loss.value + imm.loss.value;
    return rec;
  });
}

void write_history_csv(const ImmunizationRun& run, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,level,max,noise,prior,total\n";
  for (const auto& r : run.history) {
    out << r.iteration << ',' << to_string(r.level) << ',' << format_optional(r.max) << ','
        << format_optional(r.noise) << ',' << format_optional(r.prior) << ',' << format_double(r.total) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace gift
