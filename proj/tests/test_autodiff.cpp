#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "sprefine/autodiff/gradient.hpp"
#include "support.hpp"

using namespace sprefine;

TEST(Tape, ElementaryDerivatives) {
  ad::Tape t;
  const auto x = t.variable({0.3, -1.2, 2.0}, true);
  const auto y = ad::sum(ad::add(ad::mul(ad::exp(x), ad::sigmoid(x)), ad::softplus(x)));
  t.backward(y);
  const auto g = t.grad(x);
  for (int i = 0; i < 3; ++i) {
    const double v = std::vector<double>{0.3, -1.2, 2.0}[i];
    const double s = 1 / (1 + std::exp(-v));
    EXPECT_NEAR(g[i], std::exp(v) * s + std::exp(v) * s * (1 - s) + s, 1e-12);
  }
}

TEST(Tape, MinAndMaxRouteToSelectedEntry) {
  ad::Tape t;
  const auto x = t.variable({0.5, 0.2, 0.2, 0.9}, true);
  t.backward(ad::min_element(x));
  const auto g = t.grad(x);
  EXPECT_EQ(std::vector<double>(g.begin(), g.end()), (std::vector<double>{0, 1, 0, 0}));

  ad::Tape u;
  const auto a = u.variable({1.0, 2.0}, true), b = u.variable({3.0, 0.5}, true);
  u.backward(ad::sum(ad::elementwise_max({a, b})));
  const auto ga = u.grad(a), gb = u.grad(b);
  EXPECT_EQ(std::vector<double>(ga.begin(), ga.end()), (std::vector<double>{0, 1}));
  EXPECT_EQ(std::vector<double>(gb.begin(), gb.end()), (std::vector<double>{1, 0}));
}

TEST(Gradient, MatchesFiniteDifferencesOnTwoChainScene) {
  auto g = testing_support::random_gradient_case(101);
  while (g.scene.chains.size() != 2) g = testing_support::random_gradient_case(g.scene.chains.size() + 1000);
  const auto r = testing_support::finite_difference_check(g);
  EXPECT_LT(r.max_rel, 1e-3) << r.worst;
  EXPECT_GT(r.checked, r.skipped);
}

TEST(Gradient, MatchesFiniteDifferencesOnRandomScenes) {
  std::size_t checked = 0, skipped = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto g = testing_support::random_gradient_case(seed);
    const auto r = testing_support::finite_difference_check(g);
    EXPECT_LT(r.max_rel, 1e-3) << "seed " << seed << ": " << r.worst;
    checked += r.checked;
    skipped += r.skipped;
  }
  EXPECT_GE(checked, 4 * skipped);
}

TEST(Gradient, ValueEqualsTotalLossBitForBit) {
  for (std::uint64_t seed = 30; seed < 35; ++seed) {
    const auto g = testing_support::random_gradient_case(seed);
    const auto vg = value_and_grad(g.observed, g.scene, g.priors, g.lambda);
    EXPECT_EQ(vg.loss, total_loss(g.observed, g.scene, g.priors, g.lambda));
    EXPECT_EQ(vg.grads.values.size(), ParamLayout(g.scene).size());
    for (double v : vg.grads.values) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Gradient, LinearInSeed) {
  const auto g = testing_support::random_gradient_case(7);
  const auto one = value_and_grad(g.observed, g.scene, g.priors, g.lambda, {}, 1.0);
  const auto two = value_and_grad(g.observed, g.scene, g.priors, g.lambda, {}, 2.0);
  for (std::size_t i = 0; i < one.grads.values.size(); ++i)
    EXPECT_NEAR(two.grads.values[i], 2.0 * one.grads.values[i], 1e-12 * std::max(1.0, std::abs(one.grads.values[i])));
}

TEST(Gradient, PerfectReconstructionIsStationaryInKnots) {
  auto g = testing_support::random_gradient_case(9);
  g.observed = render_scene(g.scene);
  const auto vg = value_and_grad(g.observed, g.scene, g.priors, RegWeights::zero());
  EXPECT_EQ(vg.loss, 0.0);
  for (double v : vg.grads.values) EXPECT_EQ(v, 0.0);
}

TEST(Gradient, WidthScanIsLocallyQuadratic) {
  auto g = testing_support::random_gradient_case(11);
  g.observed = render_scene(g.scene);
  const double w0 = g.scene.width;
  const auto layout = ParamLayout(g.scene);
  std::size_t wi = 0;
  for (const auto& s : layout.slices())
    if (s.group == ParamGroup::Width) wi = s.offset;
  auto grad_at = [&](double w) {
    auto s = g.scene;
    s.width = w;
    return value_and_grad(g.observed, s, g.priors, RegWeights::zero()).grads.values[wi];
  };
  EXPECT_LT(grad_at(w0 * 0.9), 0.0);
  EXPECT_GT(grad_at(w0 * 1.1), 0.0);
}

TEST(Gradient, OffCanvasChainReceivesNoReconGradient) {
  auto g = testing_support::random_gradient_case(13);
  g.scene.composite.mix_logit = 40.0;
  g.scene.chains.push_back({{{-500, -500, 0.5}, {-480, -510, 0.6}, {-470, -490, 0.7}, {-460, -500, 0.4}}});
  g.priors.bar_lengths.push_back(1.0);
  const auto vg = value_and_grad(g.observed, g.scene, g.priors, RegWeights::zero());
  const std::size_t last = g.scene.chains.size() - 1;
  for (const auto& s : vg.grads.layout.slices()) {
    if (s.chain != static_cast<int>(last)) continue;
    for (std::size_t i = 0; i < s.size; ++i) EXPECT_EQ(vg.grads.values[s.offset + i], 0.0) << s.name;
  }
}

TEST(FreezeMask, SelectsGroups) {
  const auto g = testing_support::random_gradient_case(5);
  const ParamLayout layout(g.scene);
  const auto bg = freeze_mask(layout, std::vector<std::string>{"background"});
  std::size_t active = 0;
  for (const auto& s : layout.slices())
    for (std::size_t i = 0; i < s.size; ++i) {
      EXPECT_EQ(bg[s.offset + i], s.group == ParamGroup::Background);
      active += bg[s.offset + i];
    }
  EXPECT_EQ(active, 3u);
  const auto all = freeze_mask(layout, all_groups());
  EXPECT_EQ(std::count(all.begin(), all.end(), true), static_cast<long>(layout.size()));
  EXPECT_THROW(freeze_mask(layout, std::vector<std::string>{"splnes"}), InvalidInput);
}

TEST(FreezeMask, MaskedEntriesGetExactlyZero) {
  const auto g = testing_support::random_gradient_case(6);
  const ParamLayout layout(g.scene);
  const auto mask = freeze_mask(layout, GroupSet{ParamGroup::Splines, ParamGroup::Background});
  const auto full = value_and_grad(g.observed, g.scene, g.priors, g.lambda);
  const auto part = value_and_grad(g.observed, g.scene, g.priors, g.lambda, mask);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    EXPECT_EQ(part.grads.values[i], mask[i] ? full.grads.values[i] : 0.0);
  }
}

TEST(Gradient, NonFiniteParameterNamesGroup) {
  auto g = testing_support::random_gradient_case(3);
  g.scene.background.base = std::nan("");
  try {
    value_and_grad(g.observed, g.scene, g.priors, g.lambda);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("background"), std::string::npos);
  }
}

TEST(Gradient, RepeatedEvaluationIsBitIdentical) {
  const auto g = testing_support::random_gradient_case(17);
  const auto a = value_and_grad(g.observed, g.scene, g.priors, g.lambda);
  const auto b = value_and_grad(g.observed, g.scene, g.priors, g.lambda);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grads.values, b.grads.values);
}
