#pragma once

#include <cstdint>

#include <Eigen/Core>

#include "gift/checkpoint.hpp"
#include "gift/schedule.hpp"

namespace gift {

// DDPM ancestral sampling from x_T ~ N(0, I) with posterior variance beta_t:
//   x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sqrt(beta_t) * z,  z = 0 at t = 0.
Eigen::Matrix2Xd p_sample_loop(const Params& params, int concept_id, int n, const Schedule& schedule,
                               std::uint64_t seed);

}  // namespace gift
