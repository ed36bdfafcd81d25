#include <gtest/gtest.h>

#include <numbers>

#include "sprefine/metrics.hpp"
#include "sprefine/synth.hpp"
#include "support.hpp"

using namespace sprefine;

namespace {

double max_turn(const Polyline& p) {
  double m = 0;
  for (std::size_t i = 1; i + 1 < p.size(); ++i) {
    const double a = std::atan2(p[i].y - p[i - 1].y, p[i].x - p[i - 1].x);
    const double b = std::atan2(p[i + 1].y - p[i].y, p[i + 1].x - p[i].x);
    m = std::max(m, std::abs(std::remainder(b - a, 2 * std::numbers::pi)));
  }
  return m;
}

double min_distance(const Polyline& a, const Polyline& b) {
  double d = 1e300;
  for (const auto& p : a)
    for (const auto& q : b) d = std::min(d, std::hypot(p.x - q.x, p.y - q.y));
  return d;
}

std::vector<Polyline> corpus(int frames, int bodies = 1) {
  GenConfig g;
  g.n_bodies = bodies;
  std::vector<Polyline> out;
  for (int i = 0; i < frames; ++i)
    for (auto& l : gen_frame(g, i).labels) out.push_back(l);
  return out;
}

}  // namespace

TEST(GenCenterline, ZeroVarianceIsStraight) {
  GenConfig g;
  g.curvature_sigma = 0.0;
  RandomStream rng(3);
  const auto line = gen_centerline(rng, g);
  const double chord = std::hypot(line.back().x - line.front().x, line.back().y - line.front().y);
  EXPECT_NEAR(polyline_length(line), chord, 1e-9 * chord);
}

TEST(GenCenterline, LengthTurnAndMarginBounds) {
  GenConfig g;
  RandomStream rng(11);
  for (int i = 0; i < 1000; ++i) {
    const auto p = gen_centerline(rng, g);
    ASSERT_EQ(p.size(), static_cast<std::size_t>(g.label_points));
    const double len = polyline_length(p);
    ASSERT_GE(len, g.length_min - 1e-9);
    ASSERT_LE(len, g.length_max + 1e-9);
    ASSERT_LE(max_turn(p), g.max_turn + 1e-9);
    for (const auto& q : p) {
      ASSERT_GE(std::min(q.x, q.y), g.margin - 1e-9);
      ASSERT_LE(std::max(q.x, q.y), g.resolution - 1 - g.margin + 1e-9);
    }
  }
}

TEST(GenCenterline, ExhaustedBudgetThrows) {
  GenConfig g;
  g.length_min = g.length_max = 500.0;
  g.attempts = 3;
  RandomStream rng(1);
  EXPECT_THROW(gen_centerline(rng, g), NumericalError);
}

TEST(GenFrame, PureFunctionOfSeedAndIndex) {
  GenConfig g;
  g.n_bodies = 2;
  const auto a = gen_frame(g, 5), b = gen_frame(g, 5), c = gen_frame(g, 6);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.labels.size(), 2u);
  EXPECT_NE(a.image, c.image);
  g.seed = 2;
  EXPECT_NE(gen_frame(g, 5).image, a.image);
}

TEST(GenFrame, ImageInRangeAndLabelsInFrame) {
  GenConfig g;
  g.n_bodies = 3;
  for (int i = 0; i < 8; ++i) {
    const auto f = gen_frame(g, i);
    EXPECT_EQ(f.labels.size(), 3u);
    for (double v : f.image.data) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (const auto& l : f.labels)
      for (const auto& q : l) ASSERT_TRUE(q.x >= 0 && q.y >= 0 && q.x <= 63 && q.y <= 63);
  }
}

TEST(GenFrame, LabelsRoundTripThroughResampling) {
  for (const auto& l : corpus(16)) EXPECT_LT(avg_dtw(resample_polyline(l, 100), l), 1e-6);
}

TEST(GenFrame, ThreeBodiesOverlapInMostFrames) {
  GenConfig g;
  g.n_bodies = 3;
  int overlapping = 0;
  for (int i = 0; i < 256; ++i) {
    const auto f = gen_frame(g, i);
    bool any = false;
    for (int a = 0; a < 3 && !any; ++a)
      for (int b = a + 1; b < 3 && !any; ++b)
        any = min_distance(f.labels[a], f.labels[b]) <= std::max(f.body_widths[a], f.body_widths[b]);
    overlapping += any;
  }
  EXPECT_GE(overlapping, 128);
}

TEST(Perturb, IdentityMagnitudes) {
  const auto l = corpus(1).front();
  EXPECT_EQ(perturb(l, {PerturbKind::Rotation, 0.0}), l);
  EXPECT_EQ(perturb(l, {PerturbKind::Translation, 0.0, 1.3}), l);
  const auto s = perturb(l, {PerturbKind::Scaling, 1.0});
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(s[i].x, l[i].x, 1e-12);
}

TEST(Perturb, RotationIsRigidAndInvertible) {
  for (const auto& l : corpus(8)) {
    const auto r = perturb(l, {PerturbKind::Rotation, 0.35});
    EXPECT_NEAR(polyline_length(r), polyline_length(l), 1e-9);
    const auto back = perturb(r, {PerturbKind::Rotation, -0.35});
    for (std::size_t i = 0; i < l.size(); ++i) {
      ASSERT_NEAR(back[i].x, l[i].x, 1e-9);
      ASSERT_NEAR(back[i].y, l[i].y, 1e-9);
    }
  }
}

TEST(Perturb, TranslationAndScaling) {
  const auto l = corpus(1).front();
  const auto t = perturb(l, {PerturbKind::Translation, 2.0, std::numbers::pi / 2});
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_NEAR(t[i].y - l[i].y, 2.0, 1e-12);
  const auto s = perturb(l, {PerturbKind::Scaling, 0.8});
  EXPECT_NEAR(polyline_length(s), 0.8 * polyline_length(l), 1e-9);
}

TEST(Perturb, RotationOnCorpusGivesReferenceScaleInitialError) {
  const double reference = 7.14;  // px, mean initial error at 20 degrees
  double sum = 0;
  const auto labels = corpus(64);
  for (const auto& l : labels) sum += avg_dtw(l, perturb(l, {PerturbKind::Rotation, 20.0 * std::numbers::pi / 180}));
  const double mean = sum / static_cast<double>(labels.size());
  EXPECT_GT(mean, reference * 0.5);
  EXPECT_LT(mean, reference * 1.5);
}

TEST(Pca, ComponentsAreOrthonormal) {
  for (auto rep : {PcaRepresentation::TangentAngle, PcaRepresentation::Coordinates}) {
    const auto b = pca_basis(corpus(64), 8, rep);
    const Eigen::MatrixXd gram = b.components.transpose() * b.components;
    EXPECT_LT((gram - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-10);
    for (int j = 1; j < 8; ++j) EXPECT_GE(b.variances[j - 1], b.variances[j]);
  }
}

TEST(Pca, IdenticalCorpusReproducesLabel) {
  const auto l = corpus(1).front();
  const std::vector<Polyline> same(10, l);
  for (int k : {0, 1, 3}) {
    const auto b = pca_basis(same, k);
    EXPECT_LT(avg_dtw(perturb(l, {PerturbKind::Pca, static_cast<double>(k)}, &b), l), 1e-3) << "k=" << k;
  }
}

TEST(Pca, FullRankRoundTrip) {
  const auto labels = corpus(12);
  const int rank = static_cast<int>(labels.size()) - 1;  // mean-centred
  const auto b = pca_basis(labels, rank);
  for (const auto& l : labels) EXPECT_LT(avg_dtw(perturb(l, {PerturbKind::Pca, static_cast<double>(rank)}, &b), l), 1e-3);
  const auto coarse = pca_basis(labels, 1);
  double err = 0;
  for (const auto& l : labels) err += avg_dtw(perturb(l, {PerturbKind::Pca, 1.0}, &coarse), l);
  EXPECT_GT(err, 0.0);
}

TEST(Pca, RejectsBadK) {
  const auto labels = corpus(4);
  EXPECT_THROW(pca_basis(labels, 4), InvalidInput);
  const auto b = pca_basis(labels, 2);
  EXPECT_THROW(perturb(labels[0], {PerturbKind::Pca, 3.0}, &b), InvalidInput);
  EXPECT_THROW(perturb(labels[0], {PerturbKind::Pca, 1.0}, nullptr), InvalidInput);
}

TEST(StraightLine, EndpointsOfLabel) {
  const auto l = corpus(1).front();
  const auto s = straight_line(l);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s.front(), l.front());
  EXPECT_EQ(s.back(), l.back());
}
