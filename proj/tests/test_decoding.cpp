#include "oracles.hpp"
#include "tseg/decoding.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace tseg;

namespace {

ClusterOrdering identity_order(int k) {
  ClusterOrdering o;
  for (int c = 0; c < k; ++c) o.order.push_back(c);
  return o;
}

LengthModel disabled(int k) { return fit_length_model(k, 1, 1, false); }

}  // namespace

TEST(Viterbi, SingleClusterTakesColumnSum) {
  Matrix s(5, 1);
  s << -1, -2.5, 0.25, -3, -0.5;
  const auto seg = viterbi_decode(s, identity_order(1), disabled(1));
  EXPECT_EQ(seg.labels, std::vector<int>(5, 0));
  EXPECT_DOUBLE_EQ(seg.score, s.sum());
  ASSERT_EQ(seg.segments.size(), 1u);
  EXPECT_EQ(seg.segments[0], (Segment{0, 0, 5}));
}

TEST(Viterbi, TwoClusterSplit) {
  Matrix s(6, 2);
  for (int i = 0; i < 6; ++i) {
    s(i, 0) = i < 3 ? 0.0 : -100.0;
    s(i, 1) = i < 3 ? -100.0 : 0.0;
  }
  const auto seg = viterbi_decode(s, identity_order(2), disabled(2));
  EXPECT_EQ(seg.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  // Reversed ordering: B first, so the labels (ranks) are forced into a bad split.
  ClusterOrdering rev;
  rev.order = {1, 0};
  const auto r = viterbi_decode(s, rev, disabled(2));
  EXPECT_TRUE(segmentation_valid(r, 2, true));
  EXPECT_LT(r.score, seg.score);
}

TEST(Viterbi, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 600; ++trial) {
    const auto c = oracle::random_decode_case(rng, trial % 2 == 0);
    const auto k = static_cast<int>(c.ordering.order.size());
    const auto ref = oracle::viterbi(c.scores, c.ordering, c.lm, c.gamma, c.full);
    ASSERT_TRUE(ref.found);
    const auto seg = viterbi_decode(c.scores, c.ordering, c.lm, c.gamma, {c.full});
    ASSERT_EQ(seg.score, ref.score) << "trial " << trial;
    ASSERT_EQ(seg.labels, ref.labels) << "trial " << trial;
    ASSERT_TRUE(segmentation_valid(seg, k, c.full)) << "trial " << trial;
    ++checked;
  }
  EXPECT_EQ(checked, 600);
}

TEST(Viterbi, ConstantShiftKeepsArgmax) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto c = oracle::random_decode_case(rng, false);
    const auto a = viterbi_decode(c.scores, c.ordering, c.lm, c.gamma, {c.full});
    c.scores.array() -= 7.25;  // exactly representable: no rounding-induced flips
    const auto b = viterbi_decode(c.scores, c.ordering, c.lm, c.gamma, {c.full});
    if (c.full) {
      EXPECT_EQ(a.labels, b.labels) << "trial " << trial;
    }
  }
}

TEST(Viterbi, StrideTwoAgreesOnBlockStructuredScores) {
  // Scores constant within pairs of frames: gamma=2 reproduces gamma=1 when the
  // gamma=1 optimum changes only at even frames.
  Matrix s(8, 2);
  const double a[8] = {1, 1, 2, 2, -3, -3, -4, -4};
  for (int i = 0; i < 8; ++i) {
    s(i, 0) = a[i];
    s(i, 1) = -a[i];
  }
  const auto g1 = viterbi_decode(s, identity_order(2), disabled(2), 1);
  const auto g2 = viterbi_decode(s, identity_order(2), disabled(2), 2);
  EXPECT_EQ(g1.labels, g2.labels);
  EXPECT_EQ(g1.labels, (std::vector<int>{0, 0, 0, 0, 1, 1, 1, 1}));
}

TEST(Viterbi, StrideInheritsLabelOfSampledFrame) {
  Matrix s = Matrix::Zero(7, 2);
  s.col(1).tail(3).setConstant(5.0);
  const auto seg = viterbi_decode(s, identity_order(2), disabled(2), 3);
  // blocks {0,1,2} {3,4,5} {6}; the last two blocks go to cluster 1.
  EXPECT_EQ(seg.labels, (std::vector<int>{0, 0, 0, 1, 1, 1, 1}));
  EXPECT_EQ(seg.segments.back(), (Segment{1, 3, 4}));
}

TEST(Viterbi, TooFewFramesForFullTranscript) {
  const Matrix s = Matrix::Zero(3, 4);
  try {
    viterbi_decode(s, identity_order(4), disabled(4));
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("smaller k"), std::string::npos);
  }
  const auto relaxed = viterbi_decode(s, identity_order(4), disabled(4), 1, {false});
  EXPECT_TRUE(segmentation_valid(relaxed, 4, false));
  EXPECT_THROW(viterbi_decode(s, identity_order(4), disabled(4), 0), Error);
}

TEST(LengthModelFit, UniformMeans) {
  const auto lm = fit_length_model(5, 100);
  ASSERT_EQ(lm.means.size(), 5u);
  for (double m : lm.means) EXPECT_DOUBLE_EQ(m, 20.0);
  for (double m : fit_length_model(5, 100, 2).means) EXPECT_DOUBLE_EQ(m, 10.0);
  const auto off = fit_length_model(5, 100, 1, false);
  EXPECT_EQ(off.log_prob(2, 17), 0.0);
  EXPECT_THROW(fit_length_model(0, 100), Error);
}

TEST(LengthModelFit, PoissonLogProbability) {
  const auto lm = fit_length_model(1, 3);
  EXPECT_NEAR(lm.log_prob(0, 2), 2 * std::log(3.0) - 3.0 - std::log(2.0), 1e-12);
  EXPECT_NEAR(lm.log_prob(0, 0), -3.0, 1e-12);
}

TEST(LengthModelFit, PullsSegmentsTowardTheMean) {
  // Flat scores: only the length prior decides, and it favors equal halves.
  const Matrix s = Matrix::Zero(10, 2);
  const auto seg = viterbi_decode(s, identity_order(2), fit_length_model(2, 10));
  EXPECT_EQ(seg.segments[0].length, 5u);
}

TEST(LengthModelFit, ReestimationPoolsProportions) {
  Segmentation a, b;
  a.labels = {0, 0, 0, 1};
  a.segments = segments_from_labels(a.labels);
  b.labels = {0, 1, 1, 1, 1, 1, 1, 1};
  b.segments = segments_from_labels(b.labels);
  const auto lms = reestimate_length_models({a, b}, 2, 1);
  ASSERT_EQ(lms.size(), 2u);
  // Pooled fractions: cluster 0 (0.75 + 0.125)/2, cluster 1 the rest.
  EXPECT_NEAR(lms[0].means[0], 0.4375 * 4, 1e-12);
  EXPECT_NEAR(lms[1].means[1], 0.5625 * 8, 1e-12);
}

TEST(SegmentationInvariants, LabelsAndSegments) {
  EXPECT_TRUE(is_order_monotone({0, 0, 1, 1, 2}));
  EXPECT_FALSE(is_order_monotone({0, 2}));
  EXPECT_FALSE(is_order_monotone({1, 1}));
  EXPECT_FALSE(is_order_monotone({0, 1, 0}));
  const std::vector<int> l{0, 0, 1, 2, 2, 2};
  const auto segs = segments_from_labels(l);
  EXPECT_EQ(segs.size(), 3u);
  EXPECT_EQ(labels_from_segments(segs), l);
  EXPECT_THROW(labels_from_segments({{0, 1, 2}}), Error);
}

TEST(SegmentationFiles, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "tseg_seg";
  std::filesystem::create_directories(dir);
  Segmentation s;
  s.labels = {0, 0, 1, 1, 1, 2};
  s.segments = segments_from_labels(s.labels);
  save_segmentation(dir / "a.seg", s);
  EXPECT_EQ(load_segmentation(dir / "a.seg"), s.labels);
  std::ofstream(dir / "bad.seg") << "0\t0\n2\t1\n";
  EXPECT_THROW(load_segmentation(dir / "bad.seg"), ParseError);
}
