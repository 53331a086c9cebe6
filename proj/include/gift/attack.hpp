#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "gift/losses.hpp"

namespace gift {

enum class AttackMethod { full_finetune, lowrank_adapter, benign_pi };
std::string_view to_string(AttackMethod method);
AttackMethod parse_attack_method(std::string_view s);

struct AttackConfig {
  AttackMethod method = AttackMethod::full_finetune;
  int steps = 2000;
  double lr = 1e-3;
  int rank = 4;                 // lowrank only
  double adapter_scale = 1.0;   // lowrank only
  bool fresh_token = true;      // train a new concept token instead of the target's own
  TokenInit::Kind token_init = TokenInit::Kind::copy_of;  // copy of the target's embedding, or random
  int target_concept = 0;
  std::uint64_t seed = 0;
  int batch_size = 20;
  int trace_every = 100;
};

void validate(const AttackConfig& config);

struct HookMetrics {
  std::optional<double> probe_acc;
  std::optional<double> mmd;
  std::optional<double> safe_loss;
};

// Called on every trace snapshot with the model as it currently generates and the token that
// now stands for the target concept.
using MetricHook = std::function<HookMetrics(const Params& model, int token, int step)>;

struct TraceRow {
  int step = 0;
  double denoise_loss = 0.0;  // on the attack's training samples, fixed seed
  HookMetrics metrics;
};

struct AttackTrace {
  std::vector<TraceRow> rows;
};

// Columns: step, denoise_loss_DA, probe_acc, mmd, safe_loss; absent metrics are written as NA.
void write_trace_csv(const AttackTrace& trace, const std::filesystem::path& path);

struct AttackResult {
  Params params;
  int token = 0;
  AttackTrace trace;
};

// Low-rank factors for one projection matrix W (rows x cols): W_eff = W + scale * A * B.
struct AdapterFactor {
  DenseSlot slot;
  Eigen::MatrixXd A;  // rows x rank, zero at initialization
  Eigen::MatrixXd B;  // rank x cols
};

struct Adapter {
  double scale = 1.0;
  int rank = 0;
  std::vector<AdapterFactor> factors;

  Eigen::Index parameter_count() const;
};

// Factors for the query/key/value/output projections of every conditioning block.
Adapter init_adapter(const Params& base, int rank, double scale, std::uint64_t seed);
Params apply_adapter(const Params& base, const Adapter& adapter);

// Per-factor (dA, dB) from the gradient of a loss w.r.t. the merged parameter vector.
std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> adapter_gradients(const Adapter& adapter,
                                                                         const Eigen::VectorXd& merged_grad);

nlohmann::json adapter_to_json(const Adapter& adapter);
Adapter adapter_from_json(const nlohmann::json& j);

struct LowRankResult {
  Params base;  // frozen; includes the fresh token when one was added
  Adapter adapter;
  int token = 0;
  AttackTrace trace;

  Params merged() const { return apply_adapter(base, adapter); }
};

// Fine-tunes every parameter with SGD on the target's D_A samples.
AttackResult attack_full(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                         const AttackConfig& config, const MetricHook& hook = {});

// Trains only adapter factors on the conditioning projections; the base stays frozen.
LowRankResult attack_lowrank(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                             const AttackConfig& config, const MetricHook& hook = {});

// Post-immunization fine-tune of all parameters on a safe concept's D_S samples.
AttackResult finetune_benign(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                             const AttackConfig& config, const MetricHook& hook = {});

}  // namespace gift
