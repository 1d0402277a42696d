#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "dmadapter/grad_check.hpp"
#include "dmadapter/objectives.hpp"
#include "test_util.hpp"

using namespace dmadapter;
using dmadapter::testing::random_tensor;

namespace {

Tensor unit_rows(Shape shape, std::mt19937_64& rng) { return normalize_rows(random_tensor(std::move(shape), rng)); }

std::vector<int> random_ids(std::size_t n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, classes - 1);
  std::vector<int> ids(n);
  for (auto& v : ids) v = pick(rng);
  return ids;
}

// Straight double loop over (i, j) with explicit max-subtracted softmax.
double sdm_oracle(const Tensor& v, const Tensor& t, const std::vector<int>& ids, double tau, double eps) {
  const std::size_t n = v.dim(0), d = v.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += v.at(i, c) * t.at(j, c);
      s[j] = dot / tau;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double x : s) z += std::exp(x - mx);
    double count = 0.0;
    for (std::size_t k = 0; k < n; ++k) count += ids[k] == ids[i];
    for (std::size_t j = 0; j < n; ++j) {
      const double p = std::exp(s[j] - mx) / z;
      const double q = ids[j] == ids[i] ? 1.0 / count : 0.0;
      total += p * std::log(p / (q + eps));
    }
  }
  return total / static_cast<double>(n);
}

Tensor orthonormal_rows(std::size_t n, std::size_t d) {
  std::vector<double> v(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * d + i] = 1.0;
  return Tensor({n, d}, std::move(v));
}

}  // namespace

TEST(MatchDistribution, DistinctIdsGiveIdentity) {
  const Tensor q = match_distribution({4, 9, 2});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(q.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(MatchDistribution, SharedIdentitySplitsMass) {
  const Tensor q = match_distribution({1, 1, 2});
  EXPECT_EQ(q.data(), (std::vector<double>{0.5, 0.5, 0, 0.5, 0.5, 0, 0, 0, 1}));
}

TEST(MatchDistribution, RowsSumToOneAndMatrixIsSymmetric) {
  std::mt19937_64 rng(1);
  const auto ids = random_ids(24, 5, rng);
  const Tensor q = match_distribution(ids);
  for (std::size_t i = 0; i < 24; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 24; ++j) {
      s += q.at(i, j);
      EXPECT_EQ(q.at(i, j), q.at(j, i));
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Sdm, MatchesDoubleLoopOracle) {
  std::mt19937_64 rng(2);
  for (std::size_t n : {1u, 2u, 4u, 8u}) {
    for (int rep = 0; rep < 20; ++rep) {
      const Tensor v = unit_rows({n, 6}, rng), t = unit_rows({n, 6}, rng);
      const auto ids = random_ids(n, 3, rng);
      const double tau = rep % 2 ? 0.02 : 0.5;
      const double got = sdm_i2t(v, t, match_distribution(ids), {tau, 1e-8}).item();
      EXPECT_NEAR(got, sdm_oracle(v, t, ids, tau, 1e-8), 1e-10) << "n=" << n << " rep=" << rep;
    }
  }
}

TEST(Sdm, OrthonormalPairsWithDefaultEpsilonAreNearZero) {
  const Tensor v = orthonormal_rows(4, 8);
  const Tensor q = match_distribution({0, 1, 2, 3});
  EXPECT_LT(std::abs(sdm_i2t(v, v, q, {0.02, 1e-8}).item()), 1e-6);
  EXPECT_LT(std::abs(sdm_bidirectional(v, v, q, {0.02, 1e-8}).item()), 1e-6);
}

TEST(Sdm, OrthonormalPairsWithZeroEpsilonAreInfinite) {
  // Off-diagonal p is about exp(-50) > 0 where q = 0, so the KL has unmatched support.
  const Tensor v = orthonormal_rows(4, 8);
  const double loss = sdm_i2t(v, v, match_distribution({0, 1, 2, 3}), {0.02, 0.0}).item();
  EXPECT_TRUE(std::isinf(loss));
  EXPECT_GT(loss, 0.0);
}

TEST(Sdm, SingleSampleIsLogOneOverOnePlusEps) {
  std::mt19937_64 rng(3);
  const Tensor v = unit_rows({1, 5}, rng), t = unit_rows({1, 5}, rng);
  for (double eps : {0.0, 1e-8, 0.25}) {
    EXPECT_NEAR(sdm_i2t(v, t, match_distribution({7}), {0.1, eps}).item(), std::log(1.0 / (1.0 + eps)), 1e-15);
  }
}

TEST(Sdm, BidirectionalIsSymmetricInItsArguments) {
  std::mt19937_64 rng(4);
  const Tensor v = unit_rows({6, 5}, rng), t = unit_rows({6, 5}, rng);
  const Tensor q = match_distribution(random_ids(6, 3, rng));
  EXPECT_NEAR(sdm_bidirectional(v, t, q).item(), sdm_bidirectional(t, v, q).item(), 1e-12);
}

TEST(Sdm, BatchPermutationInvariance) {
  std::mt19937_64 rng(5);
  const std::size_t n = 7, d = 4;
  const Tensor v = unit_rows({n, d}, rng), t = unit_rows({n, d}, rng);
  const auto ids = random_ids(n, 3, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> pids(n);
  for (std::size_t i = 0; i < n; ++i) pids[i] = ids[perm[i]];
  const Tensor pv = gather_rows(v, perm), pt = gather_rows(t, perm);
  EXPECT_NEAR(sdm_bidirectional(v, t, match_distribution(ids)).item(),
              sdm_bidirectional(pv, pt, match_distribution(pids)).item(), 1e-10);
}

TEST(Sdm, NonNegativeWithZeroEpsilonWhenSupportMatches) {
  // All samples share one identity, so q > 0 everywhere and the KL is well defined.
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor v = unit_rows({5, 3}, rng), t = unit_rows({5, 3}, rng);
    EXPECT_GE(sdm_i2t(v, t, match_distribution({2, 2, 2, 2, 2}), {0.3, 0.0}).item(), -1e-15);
  }
}

TEST(Sdm, NonUnitRowsAreAContractViolation) {
  const Tensor q = match_distribution({0, 1});
  const Tensor good = orthonormal_rows(2, 3);
  const Tensor bad = Tensor::matrix({{2, 0, 0}, {0, 1, 0}});
  EXPECT_THROW(sdm_i2t(bad, good, q), ContractViolation);
  EXPECT_THROW(sdm_i2t(good, bad, q), ContractViolation);
}

TEST(Sdm, ShapeAndConfigErrors) {
  const Tensor a = orthonormal_rows(2, 3), b = orthonormal_rows(3, 3);
  EXPECT_THROW(sdm_i2t(a, b, match_distribution({0, 1})), DimensionError);
  EXPECT_THROW(sdm_i2t(a, a, match_distribution({0, 1, 2})), DimensionError);
  EXPECT_THROW(sdm_i2t(a, a, match_distribution({0, 1}), {0.0, 1e-8}), ConfigError);
  EXPECT_THROW(match_distribution({}), ArgumentError);
}

TEST(Sdm, GradientThroughNormalizedFeatures) {
  std::mt19937_64 rng(7);
  ParameterStore store;
  auto& raw_v = dmadapter::testing::random_param(store, "v", {4, 3}, rng);
  auto& raw_t = dmadapter::testing::random_param(store, "t", {4, 3}, rng);
  const Tensor q = match_distribution({0, 1, 0, 2});
  auto f = [&] { return sdm_bidirectional(normalize_rows(raw_v.tensor), normalize_rows(raw_t.tensor), q, {0.5, 1e-8}); };
  const auto r = grad_check(f, store.all());
  EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
}

TEST(TotalLoss, Examples) {
  const Tensor sdm = Tensor::scalar(1.25), lb = Tensor::scalar(1.0 / 3.0);
  EXPECT_EQ(total_loss(sdm, lb, lb, 0.0).item(), 1.25);
  EXPECT_NEAR(total_loss(sdm, lb, lb, 0.5).item(), 1.25 + 1.0 / 3.0, 1e-15);
  EXPECT_THROW(total_loss(sdm, lb, lb, -0.1), ConfigError);
}

TEST(TotalLoss, LinearInAlpha) {
  const Tensor sdm = Tensor::scalar(0.75), a = Tensor::scalar(0.4), b = Tensor::scalar(0.35);
  const double base = total_loss(sdm, a, b, 0.0).item();
  for (double alpha : {0.125, 0.25, 0.5, 1.0, 2.0}) {
    EXPECT_DOUBLE_EQ(total_loss(sdm, a, b, alpha).item() - base, alpha * 0.75);
  }
}

TEST(TotalLoss, GradientSplitsBetweenTerms) {
  ParameterStore store;
  auto& s = store.add("s", Tensor::scalar(0.9), true);
  auto& li = store.add("li", Tensor::scalar(0.4), true);
  auto& lt = store.add("lt", Tensor::scalar(0.2), true);
  backward(total_loss(s.tensor, li.tensor, lt.tensor, 0.5));
  EXPECT_EQ(s.tensor.grad()[0], 1.0);
  EXPECT_EQ(li.tensor.grad()[0], 0.5);
  EXPECT_EQ(lt.tensor.grad()[0], 0.5);
}
