#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "gift/losses.hpp"

namespace gift {

struct GiftConfig {
  double alpha_inner = 3e-2;
  double alpha_outer = 1e-2;
  double beta = 100.0;
  int inner_steps = 1;  // per interleave cycle
  int outer_steps = 1;
  int total_iterations = 1000;
  int batch_size = 64;
  std::uint64_t seed = 0;
  int checkpoint_every = 100;
  NoiseOptions noise;
  std::vector<int> excluded_safe_concepts;  // kept out of the D_S pool
};

void validate(const GiftConfig& config);

enum class Level { inner, outer, naive };
std::string_view to_string(Level level);

struct HistoryRecord {
  int iteration = 0;
  Level level = Level::inner;
  std::optional<double> max;
  std::optional<double> noise;
  std::optional<double> prior;
  double total = 0.0;
};

struct ImmunizationRun {
  GiftConfig config;
  std::vector<HistoryRecord> history;
  std::vector<std::pair<int, Params>> checkpoints;  // (iterations completed, params)
};

// Thrown when a step produces a non-finite gradient; carries everything done so far.
class ImmunizationAborted : public NumericalError {
 public:
  ImmunizationAborted(const std::string& what, ImmunizationRun partial, Params last_good)
      : NumericalError(what), partial(std::move(partial)), last_good(std::move(last_good)) {}
  ImmunizationRun partial;
  Params last_good;
};

// theta <- theta - alpha_inner * grad_theta L_prior on the safe batch.
Params inner_step(const Params& params, const Batch& safe_batch, const Schedule& schedule, double alpha_inner,
                  Rng& rng, LossValue* loss = nullptr);

// psi <- psi - alpha_outer * grad_psi L_immunize on the malicious batch. Coordinates outside
// psi_index are copied untouched.
Params outer_step(const Params& params, const Batch& malicious_batch, const Schedule& schedule, double alpha_outer,
                  double beta, Rng& rng, const NoiseOptions& noise = {}, LossValue* loss = nullptr);

// Alternates inner and outer steps: in each cycle of inner_steps + outer_steps iterations the
// first inner_steps are lower-level (D_S) and the rest upper-level (D_M). One rng seeded from
// config.seed drives batch selection and every loss draw.
std::pair<Params, ImmunizationRun> immunize(const Params& params, const ConceptDataset& dataset,
                                            const Schedule& schedule, const GiftConfig& config);

// Ablation: every iteration takes one joint step on L_prior (all of theta) plus L_immunize
// (psi only), both gradients taken at the same point.
std::pair<Params, ImmunizationRun> immunize_naive(const Params& params, const ConceptDataset& dataset,
                                                  const Schedule& schedule, const GiftConfig& config);

// Columns: iteration, level, max, noise, prior, total. Missing components are empty cells.
void write_history_csv(const ImmunizationRun& run, const std::filesystem::path& path);

}  // namespace gift
