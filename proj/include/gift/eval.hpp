#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "gift/losses.hpp"

namespace gift {

// ---- probe classifier ----

struct ProbeOptions {
  int train_per_concept = 300;
  int test_per_concept = 200;
  int hidden = 32;
  int steps = 1200;
  double lr = 1e-2;
  double accuracy_floor = 0.95;
};

// Small MLP from a point to a concept id, with an extra background class for points far from
// every concept so off-support samples are not forced into some concept.
struct ProbeClassifier {
  static constexpr int kBackground = -1;

  std::vector<int> classes;  // concept id per output; the last output is background
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  Eigen::Vector2d spread = Eigen::Vector2d::Ones();
  Eigen::MatrixXd W1, W2, W3;
  Eigen::VectorXd b1, b2, b3;
  std::uint64_t seed = 0;
  double heldout_accuracy = 0.0;

  Eigen::MatrixXd logits(const Eigen::Matrix2Xd& x) const;
  std::vector<int> predict(const Eigen::Matrix2Xd& x) const;
};

// Throws ValidationError when held-out accuracy on the concepts falls below the floor.
ProbeClassifier train_probe(std::span<const Concept> concepts, std::uint64_t seed, const ProbeOptions& options = {});
ProbeClassifier train_probe(const ConceptDataset& dataset, std::uint64_t seed, const ProbeOptions& options = {});

// Fraction of samples the probe assigns to `target`.
double probe_accuracy(const ProbeClassifier& probe, const Eigen::Matrix2Xd& samples, int target);

// ---- two-sample statistics ----

// Squared MMD with k(x, y) = exp(-|x - y|^2 / (2 h^2)). Columns are points.
double mmd_unbiased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth);
double mmd_biased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth);
// Median pairwise distance over the pooled points.
double median_bandwidth(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// ---- denoising loss as a metric ----

double heldout_denoise_loss(const Predictor& predictor, const ConceptDataset& dataset, Split split, int concept_id,
                            const Schedule& schedule, std::uint64_t seed);
double heldout_denoise_loss(const Params& params, const ConceptDataset& dataset, Split split, int concept_id,
                            const Schedule& schedule, std::uint64_t seed);

// ---- mutual information diagnostic ----

// Plug-in MI in nats from a bins x bins equal-width histogram; never negative.
double histogram_mi(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int bins);
// Coordinates along the leading principal axis (rows are features, columns samples).
Eigen::VectorXd principal_projection(const Eigen::MatrixXd& m);

using Representation = std::function<Eigen::MatrixXd(const Eigen::Matrix2Xd& x)>;

// MI between 1-D projections of x and of its representation z(x).
double mi_proxy(const Representation& representation, const Eigen::Matrix2Xd& x, int bins);
// Representation = activations of traced layer `layer` for concept `concept_id` at timestep t.
double mi_proxy(const Params& params, const Eigen::Matrix2Xd& x, int concept_id, const Schedule& schedule, int bins,
                int layer = 0, int t = 0);

// ---- report ----

struct MetricsRow {
  std::string state;  // model-state label, e.g. "undefended" or "immunized+attack"
  int concept_id = 0;
  std::string concept_name;
  std::string role;
  double heldout_denoise_loss = 0.0;
  std::optional<double> probe_accuracy;  // absent when no probe could be built
  double mmd = 0.0;
  double bandwidth = 0.0;
  std::optional<double> mi_proxy;
};

struct ProvenanceEntry {
  std::string state;
  std::string checkpoint;
  std::string checkpoint_digest;
  std::string config_hash;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;
  std::vector<ProvenanceEntry> provenance;
  std::string probe_status;  // "ok" or the reason it is absent
};

extern const char* const kMetricDisclaimer;

// Writes report.json and metrics.csv into `dir`.
void emit_report(const MetricsReport& report, const std::filesystem::path& dir);
MetricsReport parse_report(const std::filesystem::path& report_json);

}  // namespace gift
