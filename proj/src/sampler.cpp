#include "gift/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "gift/rng.hpp"

namespace gift {

namespace {
constexpr int kChunk = 512;
}

Eigen::Matrix2Xd p_sample_loop(const Params& params, int concept_id, int n, const Schedule& schedule,
                               std::uint64_t seed) {
  if (n < 0) throw ValidationError("p_sample_loop: negative sample count");
  if (concept_id < 0 || concept_id >= params.table_rows())
    throw ValidationError("p_sample_loop: unknown concept id " + std::to_string(concept_id));
  if (params.theta.size() != params.layout.size) throw ValidationError("p_sample_loop: parameter size mismatch");
  Eigen::Matrix2Xd out(2, n);
  if (n == 0) return out;

  Rng rng(seed);
  Eigen::Matrix2Xd x = standard_normal(2, n, rng);
  const int steps = schedule.steps();
  for (int t = steps - 1; t >= 0; --t) {
    const double beta = schedule.beta[t];
    const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar[t]);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alpha[t]);
    Eigen::Matrix2Xd z;
    if (t > 0) z = standard_normal(2, n, rng);
    for (int start = 0; start < n; start += kChunk) {
      const int len = std::min(kChunk, n - start);
      const std::vector<int> ids(static_cast<std::size_t>(len), concept_id);
      const std::vector<int> ts(static_cast<std::size_t>(len), t);
      const Eigen::Matrix2Xd xt = x.middleCols(start, len);
      const Eigen::Matrix2Xd eps_hat = forward(params, xt, ids, ts);
      auto block = x.middleCols(start, len);
      block = inv_sqrt_alpha * (xt - coef * eps_hat);
      if (t > 0) block += std::sqrt(beta) * z.middleCols(start, len);
    }
  }
  if (!x.allFinite()) throw NumericalError("p_sample_loop: non-finite samples");
  return x;
}

}  // namespace gift
