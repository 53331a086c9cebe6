#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gift/analysis.hpp"
#include "gift/attack.hpp"
#include "gift/eval.hpp"
#include "gift/gift.hpp"
#include "gift/train.hpp"

namespace gift::cli {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;

enum ExitCode { kOk = 0, kValidation = 1, kNumerical = 2, kIo = 3 };

struct ScheduleSettings {
  int steps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct EvalSettings {
  int samples = 500;  // generated per (checkpoint, concept)
  int heldout = 500;  // fresh held-out draws per concept
  std::uint64_t heldout_seed_offset = 1000;
  ProbeOptions probe;
  int mi_bins = 10;
  int mi_layer = 0;
  int mi_t = 0;
};

enum class AnalysisMode { model, quadratic_probe };

struct AnalysisSettings {
  AnalysisMode mode = AnalysisMode::model;
  double h = 1e-5;
  double tol = 1e-4;
  int batch_size = 8;
  double beta = 1.0;
  int max_coords = 500;  // gradient checks sample this many coordinates on larger models
  double alpha_i = 0.1;
  std::vector<double> alpha_p_grid{1e-2, 3e-3, 1e-3, 3e-4, 1e-4};
  TaylorOptions taylor;
  int quadratic_size = 12;
  int quadratic_psi = 4;
  std::optional<LossKind> corrupt_gradient;  // test seam: perturbs one analytic gradient
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ScheduleSettings schedule;
  std::vector<Concept> concepts;
  SplitCounts counts;
  Arch arch;
  PretrainConfig pretrain;
  GiftConfig immunize;
  bool naive = false;
  AttackConfig attack;
  bool attack_trace_metrics = false;
  EvalSettings eval;
  AnalysisSettings analysis;

  Schedule make_schedule() const;
  int table_rows() const;  // one embedding row per concept id in [0, max id]
};

// Strict parse: unknown keys, wrong types and a missing or mismatched schema_version are
// ValidationErrors naming the field; syntax errors carry line and column.
ExperimentConfig parse_config(std::string_view text, std::optional<std::uint64_t> seed_override = {},
                              std::string_view source_name = "config");
ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {});
// Fully resolved form (every default filled in); parse_config(to_json(c).dump()) == c.
nlohmann::json to_json(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);

struct Artifact {
  std::string role;  // "dataset", "checkpoint", "config", or an output kind
  std::string label;
  std::string path;
  std::string digest;
};

struct RunManifest {
  int schema_version = kManifestSchemaVersion;
  std::string command;
  std::string config_hash;
  nlohmann::json config;
  std::vector<Artifact> inputs;
  std::vector<Artifact> outputs;
  double wall_time = 0.0;
  int threads = 1;
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest read_manifest(const std::filesystem::path& path);

struct CommandOptions {
  std::optional<std::filesystem::path> config;
  std::optional<nlohmann::json> inline_config;  // used by replay instead of a file
  std::optional<std::filesystem::path> dataset;
  std::vector<std::string> checkpoints;  // "path" or "label=path"
  std::filesystem::path out_dir = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

// Raised by analyze after its reports are written when any gradient check fails.
class GradientCheckFailed : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

RunManifest cmd_make_data(const CommandOptions& options);
RunManifest cmd_pretrain(const CommandOptions& options);
RunManifest cmd_immunize(const CommandOptions& options);
RunManifest cmd_attack(const CommandOptions& options);
RunManifest cmd_eval(const CommandOptions& options);
RunManifest cmd_analyze(const CommandOptions& options);

RunManifest run_command(std::string_view command, const CommandOptions& options);

struct ReplayResult {
  RunManifest rerun;
  std::vector<std::string> mismatched;  // output labels whose bytes differ
  bool identical() const { return mismatched.empty(); }
};

// Re-executes the command recorded in a manifest into `out_dir` and compares every output.
ReplayResult cmd_replay(const std::filesystem::path& manifest, const std::filesystem::path& out_dir);

int exit_code_for_current_exception();

// Command-line front end; returns the process exit code.
int main(int argc, char** argv);

}  // namespace gift::cli
