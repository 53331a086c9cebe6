#pragma once

#include <cstdint>
#include <vector>

#include "gift/losses.hpp"

namespace gift {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  Eigen::VectorXd m, v;

  // In-place update of every coordinate of x.
  void apply(Eigen::VectorXd& x, const Eigen::VectorXd& grad);
};

struct PretrainConfig {
  int steps = 3000;
  double lr = 2e-3;
  int batch_size = 128;
  std::uint64_t seed = 0;
  bool include_malicious = true;         // train on D_M as well, so the concept is learnable
  std::vector<int> excluded_concepts;    // left out entirely (e.g. a safe concept held back for later)
};

void validate(const PretrainConfig& config);

// Standard denoising training of the whole network on D_S (+ D_M); produces the undefended model.
Params pretrain(const Params& init, const ConceptDataset& dataset, const Schedule& schedule,
                const PretrainConfig& config, std::vector<double>* losses = nullptr);

}  // namespace gift
