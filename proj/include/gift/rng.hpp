#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include <Eigen/Core>

namespace gift {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Mixes a base seed with a tuple of keys into an independent stream seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
  return h;
}

// Fills in storage order with standard normal draws.
template <typename Derived>
void fill_standard_normal(Eigen::DenseBase<Derived>& m, Rng& rng) {
  std::normal_distribution<typename Derived::Scalar> normal(0, 1);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = normal(rng);
}

template <typename Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> standard_normal(Eigen::Index rows, Eigen::Index cols,
                                                                       Rng& rng) {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> m(rows, cols);
  fill_standard_normal(m, rng);
  return m;
}

inline int uniform_int(Rng& rng, int lo, int hi_exclusive) {
  return std::uniform_int_distribution<int>(lo, hi_exclusive - 1)(rng);
}

}  // namespace gift
