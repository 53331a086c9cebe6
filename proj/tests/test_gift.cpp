#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "gift/gift.hpp"
#include "gift/train.hpp"
#include "test_support.hpp"

namespace gift {
namespace {

struct GiftFixture {
  Schedule schedule = build_schedule(50, 1e-4, 0.05);
  ConceptDataset data = make_concept_set(testing::three_concepts(), {16, 16, 32}, 4);
  Params params = init_denoiser(testing::small_arch(), 3, 9);
  Batch malicious = make_batch(split_view(data, Split::D_M));
  Batch safe = make_batch(split_view(data, Split::D_S));

  GiftConfig config(int iterations) const {
    GiftConfig c;
    c.alpha_inner = 1e-2;
    c.alpha_outer = 1e-2;
    c.total_iterations = iterations;
    c.batch_size = 8;
    c.checkpoint_every = 2;
    c.seed = 5;
    return c;
  }
};

TEST(Gift, ZeroStepSizeLeavesParametersUnchanged) {
  GiftFixture f;
  Rng a(1), b(1);
  EXPECT_EQ(inner_step(f.params, f.safe, f.schedule, 0.0, a).theta, f.params.theta);
  EXPECT_EQ(outer_step(f.params, f.malicious, f.schedule, 0.0, 1.0, b).theta, f.params.theta);
}

TEST(Gift, InnerStepMovesAgainstPriorGradient) {
  GiftFixture f;
  Rng a(2), b(2);
  const Params next = inner_step(f.params, f.safe, f.schedule, 0.05, a);
  const Draws d = draw_randomness(f.params, f.safe, LossKind::prior, f.schedule, b);
  const Eigen::VectorXd g = gradient(f.params, LossKind::prior, f.safe, d, f.schedule);
  EXPECT_LT((next.theta - (f.params.theta - 0.05 * g)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Gift, OuterStepTouchesOnlyPsi) {
  GiftFixture f;
  Rng rng(3);
  const Params next = outer_step(f.params, f.malicious, f.schedule, 0.1, 1.0, rng);
  std::vector<bool> in_psi(static_cast<std::size_t>(f.params.size()), false);
  for (auto i : f.params.psi_index) in_psi[static_cast<std::size_t>(i)] = true;
  int moved = 0;
  for (Eigen::Index i = 0; i < f.params.size(); ++i) {
    if (!in_psi[static_cast<std::size_t>(i)]) {
      ASSERT_EQ(next.theta[i], f.params.theta[i]) << "coordinate " << i;
    } else if (next.theta[i] != f.params.theta[i]) {
      ++moved;
    }
  }
  EXPECT_GT(moved, 0);
}

TEST(Gift, ZeroBetaOuterDirectionIsMaxGradientOnPsi) {
  GiftFixture f;
  Rng a(4), b(4);
  const Params next = outer_step(f.params, f.malicious, f.schedule, 0.1, 0.0, a);
  const Draws d = draw_randomness(f.params, f.malicious, LossKind::immunize, f.schedule, b);
  const Eigen::VectorXd g = gradient_psi(f.params, LossKind::max, f.malicious, d, f.schedule);
  const Eigen::VectorXd step = gather(Eigen::VectorXd(next.theta - f.params.theta), f.params.psi_index);
  EXPECT_LT((step + 0.1 * g).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Gift, InnerOnlyScheduleMatchesManualLoop) {
  GiftFixture f;
  GiftConfig c = f.config(4);
  c.inner_steps = 1;
  c.outer_steps = 0;
  const auto [out, run] = immunize(f.params, f.data, f.schedule, c);

  Params manual = f.params;
  const auto pool = split_view(f.data, Split::D_S);
  Rng rng(c.seed);
  for (int i = 0; i < 4; ++i) {
    const Batch b = sample_batch(pool, c.batch_size, rng);
    manual = inner_step(manual, b, f.schedule, c.alpha_inner, rng);
  }
  EXPECT_EQ(out.theta, manual.theta);
  for (const auto& r : run.history) EXPECT_EQ(r.level, Level::inner);
}

TEST(Gift, ImmunizeIsDeterministicAndRecordsHistory) {
  GiftFixture f;
  GiftConfig c = f.config(6);
  c.inner_steps = 2;
  c.outer_steps = 1;
  const auto [a, run_a] = immunize(f.params, f.data, f.schedule, c);
  const auto [b, run_b] = immunize(f.params, f.data, f.schedule, c);
  EXPECT_EQ(a.theta, b.theta);
  ASSERT_EQ(run_a.history.size(), 6u);
  const Level expected[] = {Level::inner, Level::inner, Level::outer, Level::inner, Level::inner, Level::outer};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(run_a.history[i].level, expected[i]);
    EXPECT_EQ(run_a.history[i].iteration, static_cast<int>(i));
    EXPECT_EQ(run_a.history[i].total, run_b.history[i].total);
  }
  EXPECT_TRUE(run_a.history[0].prior.has_value());
  EXPECT_FALSE(run_a.history[0].max.has_value());
  EXPECT_TRUE(run_a.history[2].noise.has_value());
  ASSERT_EQ(run_a.checkpoints.size(), 3u);
  EXPECT_EQ(run_a.checkpoints.back().first, 6);
  EXPECT_EQ(run_a.checkpoints.back().second.theta, a.theta);
}

TEST(Gift, NaiveWithZeroStepsIsIdentity) {
  GiftFixture f;
  GiftConfig c = f.config(3);
  c.alpha_inner = 0.0;
  c.alpha_outer = 0.0;
  const auto [out, run] = immunize_naive(f.params, f.data, f.schedule, c);
  EXPECT_EQ(out.theta, f.params.theta);
  ASSERT_EQ(run.history.size(), 3u);
  for (const auto& r : run.history) {
    EXPECT_EQ(r.level, Level::naive);
    EXPECT_NEAR(r.total, *r.prior + *r.max + c.beta * *r.noise, 1e-12);
  }
}

TEST(Gift, ZeroIterationsReturnsInput) {
  GiftFixture f;
  const auto [out, run] = immunize(f.params, f.data, f.schedule, f.config(0));
  EXPECT_EQ(out.theta, f.params.theta);
  EXPECT_TRUE(run.history.empty());
}

TEST(Gift, RejectsBadConfig) {
  GiftFixture f;
  GiftConfig c = f.config(2);
  c.inner_steps = 0;
  c.outer_steps = 0;
  EXPECT_THROW(immunize(f.params, f.data, f.schedule, c), ValidationError);
  c = f.config(2);
  c.alpha_outer = -1.0;
  EXPECT_THROW(immunize(f.params, f.data, f.schedule, c), ValidationError);
  c = f.config(2);
  c.beta = -0.5;
  EXPECT_THROW(validate(c), ValidationError);
}

TEST(Gift, NonFiniteGradientAbortsWithPartialRun) {
  GiftFixture f;
  GiftConfig c = f.config(5);
  c.alpha_inner = 1e200;
  c.alpha_outer = 1e200;
  try {
    immunize(f.params, f.data, f.schedule, c);
    FAIL() << "expected abort";
  } catch (const ImmunizationAborted& e) {
    EXPECT_LT(e.partial.history.size(), 5u);
    EXPECT_TRUE(e.last_good.theta.allFinite());
  }
}

TEST(Gift, HistoryCsvHasBlankCellsForMissingComponents) {
  GiftFixture f;
  const auto [out, run] = immunize(f.params, f.data, f.schedule, f.config(2));
  const auto path = std::filesystem::temp_directory_path() / "gift_history_test.csv";
  write_history_csv(run, path);
  std::ifstream in(path);
  std::string header, first, second;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  EXPECT_EQ(header, "iteration,level,max,noise,prior,total");
  EXPECT_EQ(first.rfind("0,inner,,,", 0), 0u);
  EXPECT_EQ(second.rfind("1,outer,", 0), 0u);
  std::filesystem::remove(path);
}

TEST(Pretrain, ReducesDenoisingLoss) {
  GiftFixture f;
  PretrainConfig c;
  c.steps = 300;
  c.lr = 5e-3;
  c.batch_size = 32;
  c.seed = 1;
  const Params trained = pretrain(f.params, f.data, f.schedule, c);
  Rng a(11), b(11);
  const double before = loss_prior(f.params, f.safe, f.schedule, a).value;
  const double after = loss_prior(trained, f.safe, f.schedule, b).value;
  EXPECT_LT(after, 0.8 * before);
}

TEST(Pretrain, AdamFirstStepHasMagnitudeLr) {
  AdamState adam;
  adam.lr = 0.1;
  Eigen::VectorXd x = Eigen::VectorXd::Zero(3);
  Eigen::VectorXd g(3);
  g << 2.0, -0.5, 1e-3;
  adam.apply(x, g);
  // Bias-corrected first step is lr * g / (|g| + eps).
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(x[i], -0.1 * g[i] / (std::abs(g[i]) + 1e-8), 1e-12);
}

}  // namespace
}  // namespace gift
