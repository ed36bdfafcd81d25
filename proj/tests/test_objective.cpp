#include <gtest/gtest.h>

#include <random>

#include "sprefine/objective.hpp"
#include "support.hpp"

using namespace sprefine;
using testing_support::random_chain;
using testing_support::random_image;

namespace {

Scene two_chain_scene() {
  Scene s;
  s.resolution = 32;
  s.chains = {{{{6, 8, 0.7}, {14, 12, 0.5}, {24, 10, 0.9}}}, {{{10, 25, 0.4}, {20, 20, 0.8}, {27, 26, 0.6}}}};
  s.width = 2.3;
  s.background = {0.1, 0.05, -0.02};
  return s;
}

Priors priors_for(const Scene& s) {
  Priors p;
  for (const auto& c : s.chains) p.bar_lengths.push_back(arc_length(fit_natural_cubic(c)) + 3.0);
  p.bar_w = 0.3;
  p.bar_W = 1.5;
  return p;
}

}  // namespace

TEST(ReconLoss, Examples) {
  Image a(3, 3, 0.4);
  EXPECT_EQ(recon_loss(a, a), 0.0);
  EXPECT_DOUBLE_EQ(recon_loss(Image(5, 4, 0.0), Image(5, 4, 0.5)), 0.25);
  EXPECT_THROW(recon_loss(Image(3, 3), Image(3, 4)), InvalidInput);
}

TEST(ReconLoss, MatchesElementwiseOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const auto y = random_image(rng, 4, 4), yh = random_image(rng, 4, 4);
    double s = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) s += (y(i, j) - yh(i, j)) * (y(i, j) - yh(i, j));
    EXPECT_NEAR(recon_loss(y, yh), s / 16.0, 1e-15);
    EXPECT_GT(recon_loss(y, yh), 0.0);
  }
}

TEST(RegLoss, LengthTermExample) {
  Scene s;
  s.resolution = 32;
  s.chains = {{{{5, 16, 0.5}, {10, 16, 0.5}, {15, 16, 0.5}}}};
  Priors p{{8.0}, 0.5, s.width};
  EXPECT_NEAR(reg_loss(s, p, {0.5, 0, 0, 0}), 2.0, 1e-9);
}

TEST(RegLoss, ZeroAtPriorsForStraightChains) {
  Scene s;
  s.resolution = 32;
  s.width = 2.5;
  s.chains = {{{{5, 5, 0.5}, {10, 10, 0.8}, {15, 15, 0.6}}}};
  Priors p{{std::hypot(10.0, 10.0)}, 0.5, 2.5};
  EXPECT_NEAR(reg_loss(s, p, RegWeights{}), 0.0, 1e-12);
}

TEST(RegLoss, ZeroWeightsGiveZero) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Scene s;
    s.resolution = 64;
    s.chains = {random_chain(rng, 5), random_chain(rng, 3)};
    EXPECT_EQ(reg_loss(s, priors_for(s), RegWeights::zero()), 0.0);
  }
}

TEST(RegLoss, TermsMatchIndependentFormula) {
  const auto s = two_chain_scene();
  const auto p = priors_for(s);
  const RegWeights lam{1e-3, 2e-2, 0.7, 5e-2};
  double expect = 0;
  for (std::size_t i = 0; i < s.chains.size(); ++i) {
    const auto curve = fit_natural_cubic(s.chains[i]);
    // Second differences of M_L uniform samples: x'' h^2 per step, mean over interior.
    const int m = kDefaultQuadratureCount;
    std::vector<Point3> pts;
    for (int k = 0; k < m; ++k) pts.push_back(curve.eval(static_cast<double>(k) / (m - 1)));
    double len = 0, curv = 0;
    for (int k = 1; k < m; ++k) len += std::hypot(pts[k].x - pts[k - 1].x, pts[k].y - pts[k - 1].y);
    for (int k = 1; k + 1 < m; ++k) {
      const double ddx = pts[k + 1].x - 2 * pts[k].x + pts[k - 1].x, ddy = pts[k + 1].y - 2 * pts[k].y + pts[k - 1].y;
      curv += ddx * ddx + ddy * ddy;
    }
    curv /= (m - 2);
    double wmin = 1;
    for (const auto& k : s.chains[i].knots) wmin = std::min(wmin, k.w);
    expect += lam.length * (len - p.bar_lengths[i]) * (len - p.bar_lengths[i]) + lam.curvature * curv +
              lam.min_width * (wmin - p.bar_w) * (wmin - p.bar_w);
  }
  expect += lam.width * (s.width - p.bar_W) * (s.width - p.bar_W);
  EXPECT_NEAR(reg_loss(s, p, lam), expect, 1e-10 * std::max(1.0, expect));
}

TEST(RegLoss, NonNegativeAndTranslationInvariant) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> shift(-10, 10);
  for (int trial = 0; trial < 25; ++trial) {
    Scene s;
    s.resolution = 64;
    s.chains = {random_chain(rng, 4, 15, 45), random_chain(rng, 6, 15, 45)};
    const auto p = priors_for(s);
    const double base = reg_loss(s, p, RegWeights{});
    EXPECT_GE(base, 0.0);
    const double dx = shift(rng), dy = shift(rng);
    auto t = s;
    for (auto& c : t.chains)
      for (auto& k : c.knots) k.x += dx, k.y += dy;
    EXPECT_NEAR(reg_loss(t, p, RegWeights{}), base, 1e-12 * base + 1e-15);
  }
}

TEST(RegLoss, RejectsBadPriorsAndWeights) {
  const auto s = two_chain_scene();
  EXPECT_THROW(reg_loss(s, Priors{{1.0}, 0.5, 2.0}, RegWeights{}), InvalidInput);
  EXPECT_THROW(reg_loss(s, priors_for(s), RegWeights{-1, 0, 0, 0}), InvalidInput);
  EXPECT_THROW(reg_loss(s, Priors{{1.0, 2.0}, 1.5, 2.0}, RegWeights{}), InvalidInput);
}

TEST(TotalLoss, AdditiveAndZeroAtPerfectReconstruction) {
  const auto s = two_chain_scene();
  const auto p = priors_for(s);
  const auto y = render_scene(s);
  EXPECT_EQ(total_loss(y, s, p, RegWeights::zero()), 0.0);
  std::mt19937_64 rng(4);
  const auto noisy = random_image(rng, 32, 32);
  const RegWeights lam{};
  EXPECT_NEAR(total_loss(noisy, s, p, lam), recon_loss(noisy, render_scene(s)) + reg_loss(s, p, lam), 1e-15);
}

TEST(TotalLoss, MonotoneInWidthWeightWhenOffPrior) {
  const auto s = two_chain_scene();
  const auto p = priors_for(s);
  const auto y = render_scene(s);
  RegWeights a{}, b{};
  b.width = a.width * 10;
  EXPECT_LT(total_loss(y, s, p, a), total_loss(y, s, p, b));
}
