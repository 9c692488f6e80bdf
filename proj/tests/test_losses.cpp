#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "gtest/gtest.h"

#include "ddrn/embedding_space.hpp"
#include "ddrn/gradcheck.hpp"
#include "ddrn/losses.hpp"
#include "ddrn/ops.hpp"
#include "test_util.hpp"

namespace ddrn {
namespace {

using testing::random_normal;
using testing::random_tensor;

std::vector<int> random_labels(std::size_t n, int classes, Rng& rng) {
  std::uniform_int_distribution<int> u(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = u(rng);
  return y;
}

// Direct evaluation of the margin loss from normalised dot products.
double arc_oracle(const Tensor<double>& f, const std::vector<int>& y, const Tensor<double>& w, double m, double s) {
  const std::size_t b = f.rows(), c = w.rows(), d = f.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<double> logit(c);
    for (std::size_t j = 0; j < c; ++j) {
      double dot = 0.0, nf = 0.0, nw = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += f.at(i, k) * w.at(j, k);
        nf += f.at(i, k) * f.at(i, k);
        nw += w.at(j, k) * w.at(j, k);
      }
      logit[j] = s * (dot / std::sqrt(nf * nw) + (static_cast<int>(j) == y[i] ? m : 0.0));
    }
    double z = 0.0;
    for (double l : logit) z += std::exp(l);
    total -= std::log(std::exp(logit[y[i]]) / z);
  }
  return total / static_cast<double>(b);
}

// ---- arcface ----

TEST(ArcFaceTest, MarginFreeUnitScaleIsSoftmaxCrossEntropy) {
  Rng rng(1);
  auto f = random_normal<double>({6, 5}, rng);
  auto w = random_normal<double>({4, 5}, rng);
  const auto y = random_labels(6, 4, rng);
  Tape<double> tape;
  Var<double> cos = cosine_matrix(tape.constant(f), tape.constant(w));
  const double arc = arcface_loss(tape.constant(f), y, tape.constant(w), {0.0, 1.0}).item();
  const double ce = cross_entropy_with_label_smoothing(cos, y, 0.0).item();
  EXPECT_NEAR(arc, ce, 1e-12);
}

TEST(ArcFaceTest, AlignedFeatureIsSoftplusOfMinus24) {
  Tape<double> tape;
  Var<double> f = tape.constant(Tensor<double>({1, 2}, {3.0, 0.0}));
  Var<double> w = tape.constant(Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 2.0}));
  EXPECT_NEAR(arcface_loss(f, {0}, w, {0.2, 20.0}).item(), std::log1p(std::exp(-24.0)), 1e-15);
}

TEST(ArcFaceTest, MatchesDirectOracle) {
  Rng rng(2);
  auto f = random_normal<double>({5, 8}, rng);
  auto w = random_normal<double>({7, 8}, rng);
  const auto y = random_labels(5, 7, rng);
  Tape<double> tape;
  EXPECT_NEAR(arcface_loss(tape.constant(f), y, tape.constant(w), {}).item(), arc_oracle(f, y, w, 0.2, 20.0), 1e-10);
}

TEST(ArcFaceTest, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  auto f = random_normal<double>({4, 8}, rng);
  auto w = random_normal<double>({5, 8}, rng);
  const std::vector<int> y{0, 3, 4, 3};
  auto wrt_f = finite_diff_check(
      [&](Tape<double>& t, const Var<double>& x) { return arcface_loss(x, y, t.constant(w), {}); }, f);
  EXPECT_TRUE(wrt_f.pass) << wrt_f.max_rel_error;
  auto wrt_w = finite_diff_check(
      [&](Tape<double>& t, const Var<double>& x) { return arcface_loss(t.constant(f), y, x, {}); }, w);
  EXPECT_TRUE(wrt_w.pass) << wrt_w.max_rel_error;
}

// The margin is added to the true-class cosine, which raises its logit, so
// the loss can only fall as m grows.
TEST(ArcFaceTest, NonIncreasingInMargin) {
  Rng rng(4);
  auto f = random_normal<double>({6, 4}, rng);
  auto w = random_normal<double>({3, 4}, rng);
  const auto y = random_labels(6, 3, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (double m : {0.0, 0.05, 0.1, 0.2, 0.5, 1.0}) {
    Tape<double> tape;
    const double l = arcface_loss(tape.constant(f), y, tape.constant(w), {m, 20.0}).item();
    EXPECT_LE(l, prev);
    prev = l;
  }
}

TEST(ArcFaceTest, RejectsBadInputs) {
  Tape<double> tape;
  Var<double> f = tape.constant(Tensor<double>({1, 2}, {1.0, 0.0}));
  Var<double> w = tape.constant(Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 1.0}));
  EXPECT_THROW(arcface_loss(f, {2}, w, {}), std::out_of_range);
  EXPECT_THROW(arcface_loss(f, {-1}, w, {}), std::out_of_range);
  EXPECT_THROW(arcface_loss(tape.constant(Tensor<double>({1, 2})), {0}, w, {}), NumericError);
  EXPECT_THROW(arcface_loss(f, {0}, w, {-0.1, 20.0}), ConfigError);
  EXPECT_THROW(arcface_loss(f, {0}, w, {0.2, 0.0}), ConfigError);
}

// ---- subcenter ----

TEST(SubcenterTest, SingleSubcenterIsCosineMatrix) {
  Rng rng(5);
  auto f = random_normal<double>({3, 4}, rng);
  auto w = random_normal<double>({5, 4}, rng);
  Tape<double> tape;
  Var<double> a = subcenter_cos(tape.constant(f), tape.constant(w), 1);
  Var<double> b = cosine_matrix(tape.constant(f), tape.constant(w));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.value()[i], b.value()[i]);
}

TEST(SubcenterTest, DuplicatedSubcentersMatchSingle) {
  Rng rng(6);
  auto f = random_normal<double>({3, 4}, rng);
  auto w = random_normal<double>({5, 4}, rng);
  Tensor<double> dup({15, 4});
  for (std::size_t c = 0; c < 5; ++c) {
    for (std::size_t r = 0; r < 3; ++r) std::copy_n(w.row(c).data(), 4, dup.row(c * 3 + r).data());
  }
  Tape<double> tape;
  Var<double> a = subcenter_cos(tape.constant(f), tape.constant(dup), 3);
  Var<double> b = subcenter_cos(tape.constant(f), tape.constant(w), 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.value()[i], b.value()[i]);
}

TEST(SubcenterTest, MatchesLoopAndMaxOracle) {
  Rng rng(7);
  auto f = random_normal<double>({3, 6}, rng);
  auto w = random_normal<double>({12, 6}, rng);
  Tape<double> tape;
  Var<double> got = subcenter_cos(tape.constant(f), tape.constant(w), 3);
  Tensor<double> fn = normalized_rows(f), wn = normalized_rows(w);
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t c = 0; c < 4; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < 3; ++k) {
        double dot = 0.0;
        for (std::size_t j = 0; j < 6; ++j) dot += fn.at(b, j) * wn.at(c * 3 + k, j);
        best = std::max(best, dot);
      }
      EXPECT_NEAR(got.value()[b * 4 + c], best, 1e-14);
      // Max dominates each single subcenter.
      EXPECT_GE(got.value()[b * 4 + c] + 1e-15, best);
    }
  }
  EXPECT_THROW(subcenter_cos(tape.constant(f), tape.constant(w), 5), ShapeError);
}

TEST(SubcenterTest, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  auto f = random_normal<double>({3, 5}, rng);
  auto w = random_normal<double>({8, 5}, rng);
  const std::vector<int> y{0, 3, 1};
  auto r = finite_diff_check(
      [&](Tape<double>& t, const Var<double>& x) { return subcenter_arcface_loss(t.constant(f), y, x, 2, {}); }, w,
      1e-5, 1e-5);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

// ---- routing ----

HierarchyShape hierarchy(std::size_t levels, std::size_t classes) {
  HierarchyShape s;
  s.levels = levels;
  s.classes = classes;
  return s;
}

TEST(RoutingTest, SingleLevelMasksContinue) {
  // Continue center equals the feature but is masked at the last level.
  Tensor<double> w({3, 3}, {0, 1, 0, 0, 0, 1, 1, 0, 0});
  const std::vector<double> feat{1.0, 0.2, 0.1};
  RoutingTrace tr = hs_route<double>(feat, w, hierarchy(1, 2));
  EXPECT_EQ(tr.level, 0u);
  EXPECT_EQ(tr.argmax, 0u);
  ASSERT_EQ(tr.visited_rows.size(), 1u);
}

TEST(RoutingTest, AlignedFeatureStopsAtFirstLevel) {
  Tensor<double> w = Tensor<double>::identity(4);
  Tensor<double> stack({8, 4});
  for (std::size_t r = 0; r < 4; ++r) {
    std::copy_n(w.row(r).data(), 4, stack.row(r).data());
    std::copy_n(w.row(r).data(), 4, stack.row(4 + r).data());
  }
  const std::vector<double> feat{0, 0, 2.0, 0};
  RoutingTrace tr = hs_route<double>(feat, stack, hierarchy(2, 3));
  EXPECT_EQ(tr.level, 0u);
  EXPECT_EQ(tr.argmax, 2u);
}

TEST(RoutingTest, ContinueAdvancesToNextLevel) {
  // Level 0: continue center is e0. Level 1: class 1 is e0 + 0.5 e1.
  Tensor<double> stack({6, 3}, {0, 1, 0,   //
                                0, 0, 1,   //
                                1, 0, 0,   //
                                0, 0, 1,   //
                                1, 0.5, 0, //
                                0, -1, 0});
  const std::vector<double> feat{1.0, 0.1, 0.0};
  RoutingTrace tr = hs_route<double>(feat, stack, hierarchy(2, 2));
  // Hand-stepped: level 0 cosines ≈ (0.0995, 0, 0.995) -> continue wins;
  // level 1 cosines ≈ (0, 0.9333, -0.0995), continue masked -> class 1.
  EXPECT_EQ(tr.level, 1u);
  EXPECT_EQ(tr.argmax, 1u);
  ASSERT_EQ(tr.visited_rows.size(), 2u);
  EXPECT_NEAR(tr.visited_rows[0][2], 1.0 / std::sqrt(1.01), 1e-12);
  EXPECT_NEAR(tr.visited_rows[1][1], 1.05 / std::sqrt(1.01 * 1.25), 1e-12);
}

TEST(RoutingTest, InvariantToFeatureScale) {
  Rng rng(9);
  auto w = random_normal<double>({3 * 6, 4}, rng);
  for (int trial = 0; trial < 50; ++trial) {
    auto f = random_normal<double>({4}, rng);
    std::vector<double> a(f.data().begin(), f.data().end()), b = a;
    for (auto& v : b) v *= 8.0;
    RoutingTrace ta = hs_route<double>(a, w, hierarchy(3, 5));
    RoutingTrace tb = hs_route<double>(b, w, hierarchy(3, 5));
    EXPECT_EQ(ta.level, tb.level);
    EXPECT_EQ(ta.argmax, tb.argmax);
  }
}

TEST(RoutingTest, ChosenLevelIsFirstNonContinue) {
  Rng rng(10);
  const auto shape = hierarchy(3, 4);
  auto w = random_normal<double>({shape.total_rows(), 3}, rng);
  for (int trial = 0; trial < 100; ++trial) {
    auto f = random_normal<double>({3}, rng);
    RoutingTrace tr = hs_route<double>(f.data(), w, shape);
    ASSERT_EQ(tr.visited_rows.size(), tr.level + 1);
    for (std::size_t l = 0; l < tr.level; ++l) {
      const auto& row = tr.visited_rows[l];
      EXPECT_EQ(std::max_element(row.begin(), row.end()) - row.begin(), static_cast<long>(shape.continue_index()));
    }
    EXPECT_LT(tr.argmax, shape.classes);
  }
}

// ---- HS-Arcface ----

TEST(HsArcfaceTest, SingleLevelEqualsArcFace) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto f = random_normal<double>({8, 6}, rng);
    auto w = random_normal<double>({5, 6}, rng);
    const auto y = random_labels(8, 4, rng);
    Tensor<double> flat({4, 6});
    std::copy_n(w.data().data(), 24, flat.data().data());
    Tape<double> tape;
    const double hs = hs_arcface_loss(tape.constant(f), y, tape.constant(w), hierarchy(1, 4), {}).item();
    const double arc = arcface_loss(tape.constant(f), y, tape.constant(flat), {}).item();
    EXPECT_NEAR(hs, arc, 1e-6);
  }
}

TEST(HsArcfaceTest, DoubleReductionIsSoftmaxCrossEntropy) {
  Rng rng(12);
  auto f = random_normal<double>({5, 4}, rng);
  auto w = random_normal<double>({4, 4}, rng);
  const auto y = random_labels(5, 3, rng);
  Tape<double> tape;
  const double hs = hs_arcface_loss(tape.constant(f), y, tape.constant(w), hierarchy(1, 3), {0.0, 1.0}).item();
  Var<double> cos = slice_cols(cosine_matrix(tape.constant(f), tape.constant(w)), 0, 3);
  EXPECT_NEAR(hs, cross_entropy_with_label_smoothing(cos, y, 0.0).item(), 1e-12);
}

TEST(HsArcfaceTest, MatchesRoutedOracle) {
  Rng rng(13);
  const auto shape = hierarchy(3, 4);
  auto f = random_normal<double>({10, 5}, rng);
  auto w = random_normal<double>({shape.total_rows(), 5}, rng);
  const auto y = random_labels(10, 4, rng);
  Tape<double> tape;
  std::vector<RoutingTrace> traces;
  const double got = hs_arcface_loss(tape.constant(f), y, tape.constant(w), shape, {}, nullptr, &traces).item();
  double expect = 0.0;
  for (std::size_t b = 0; b < 10; ++b) {
    RoutingTrace tr = hs_route<double>(f.row(b), w, shape);
    EXPECT_EQ(tr.level, traces[b].level);
    Tensor<double> level({4, 5});
    std::copy_n(w.row(tr.level * 5).data(), 20, level.data().data());
    Tensor<double> fb({1, 5}, std::vector<double>(f.row(b).begin(), f.row(b).end()));
    expect += arc_oracle(fb, {y[b]}, level, 0.2, 20.0) / 10.0;
  }
  EXPECT_NEAR(got, expect, 1e-10);
}

TEST(HsArcfaceTest, FrozenRoutingGradientMatchesFiniteDifferences) {
  Rng rng(14);
  const auto shape = hierarchy(3, 3);
  auto f = random_normal<double>({4, 5}, rng);
  auto w = random_normal<double>({shape.total_rows(), 5}, rng);
  const std::vector<int> y{0, 2, 1, 2};
  const std::vector<std::size_t> levels{0, 2, 1, 1};
  const ArcMarginParams p{0.2, 4.0};
  auto rf = finite_diff_check(
      [&](Tape<double>& t, const Var<double>& x) { return hs_arcface_loss(x, y, t.constant(w), shape, p, &levels); },
      f, 1e-5, 1e-5);
  EXPECT_TRUE(rf.pass) << rf.max_rel_error;
  auto rw = finite_diff_check(
      [&](Tape<double>& t, const Var<double>& x) { return hs_arcface_loss(t.constant(f), y, x, shape, p, &levels); },
      w, 1e-5, 1e-5);
  EXPECT_TRUE(rw.pass) << rw.max_rel_error;
  // Unchosen levels and continue centers receive no gradient.
  for (std::size_t c = 0; c < 5; ++c) {
    EXPECT_EQ(rw.analytic[shape.continue_index() * 5 + c], 0.0);
  }
}

TEST(HsArcfaceTest, RejectsBadInputs) {
  Tape<double> tape;
  Var<double> f = tape.constant(Tensor<double>({1, 2}, {1.0, 0.0}));
  Var<double> w = tape.constant(Tensor<double>({6, 2}, 1.0));
  EXPECT_THROW(hs_arcface_loss(f, {2}, w, hierarchy(2, 2), {}), std::out_of_range);
  EXPECT_THROW(hs_arcface_loss(f, {0}, w, hierarchy(3, 2), {}), ShapeError);
}

// ---- id / triplet ----

TEST(IdLossTest, Examples) {
  Tape<double> tape;
  Tensor<double> sharp({2, 3}, {1e3, 0, 0, 0, 0, 1e3});
  EXPECT_NEAR(id_loss(tape.constant(sharp), {0, 2}, 0.0).item(), 0.0, 1e-300);
  EXPECT_NEAR(id_loss(tape.constant(Tensor<double>({2, 7}, 1.0)), {3, 6}).item(), std::log(7.0), 1e-12);
  EXPECT_THROW(id_loss(tape.constant(sharp), {0, 3}), std::out_of_range);
}

double triplet_oracle(const Tensor<double>& f, const std::vector<int>& y, double margin) {
  const std::size_t n = f.rows();
  auto dist = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t c = 0; c < f.cols(); ++c) s += (f.at(i, c) - f.at(j, c)) * (f.at(i, c) - f.at(j, c));
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || y[p] != y[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (y[q] == y[a]) continue;
        worst = std::max(worst, dist(a, p) - dist(a, q) + margin);
      }
    }
    total += std::max(0.0, worst);
  }
  return total / static_cast<double>(n);
}

TEST(TripletTest, IdenticalFeaturesGiveMargin) {
  Tape<double> tape;
  EXPECT_NEAR(triplet_loss(tape.constant(Tensor<double>({4, 3}, 0.5)), {0, 0, 1, 1}, 0.3).item(), 0.3, 1e-15);
}

TEST(TripletTest, SeparatedClustersGiveZero) {
  Tape<double> tape;
  Tensor<double> f({4, 2}, {0, 0, 0, 0.1, 5, 5, 5, 5.1});
  EXPECT_EQ(triplet_loss(tape.constant(f), {0, 0, 1, 1}, 0.3).item(), 0.0);
}

TEST(TripletTest, MatchesExhaustiveScan) {
  Rng rng(15);
  const std::vector<int> y{0, 1, 0, 1, 1, 0, 0, 1};
  for (int trial = 0; trial < 20; ++trial) {
    auto f = random_normal<double>({8, 4}, rng, 0.3);
    Tape<double> tape;
    EXPECT_NEAR(triplet_loss(tape.constant(f), y, 0.3).item(), triplet_oracle(f, y, 0.3), 1e-10);
  }
}

TEST(TripletTest, GradientMatchesFiniteDifferences) {
  Rng rng(16);
  auto f = random_normal<double>({8, 4}, rng, 0.3);
  const std::vector<int> y{0, 0, 0, 0, 1, 1, 1, 1};
  auto r = finite_diff_check([&](Tape<double>&, const Var<double>& x) { return triplet_loss(x, y, 0.3); }, f, 1e-5,
                             1e-5);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

TEST(TripletTest, RejectsBadBatches) {
  Tape<double> tape;
  Var<double> f = tape.constant(Tensor<double>({4, 2}, 1.0));
  EXPECT_THROW(triplet_loss(f, {0, 0, 0, 0}, 0.3), BatchCompositionError);
  EXPECT_THROW(triplet_loss(f, {0, 0, 1, 2}, 0.3), BatchCompositionError);
}

TEST(LossPropertyTest, PermutationInvariant) {
  Rng rng(17);
  const auto shape = hierarchy(3, 4);
  auto f = random_normal<double>({8, 5}, rng);
  auto w = random_normal<double>({shape.total_rows(), 5}, rng);
  auto flat = random_normal<double>({4, 5}, rng);
  const std::vector<int> y{0, 1, 2, 3, 0, 1, 2, 3};
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> yp(8);
  for (std::size_t i = 0; i < 8; ++i) yp[i] = y[perm[i]];

  Tape<double> tape;
  Var<double> fv = tape.constant(f);
  Var<double> fp = gather_rows(fv, perm);
  Var<double> wv = tape.constant(w), flv = tape.constant(flat);
  EXPECT_NEAR(arcface_loss(fv, y, flv, {}).item(), arcface_loss(fp, yp, flv, {}).item(), 1e-12);
  EXPECT_NEAR(hs_arcface_loss(fv, y, wv, shape, {}).item(), hs_arcface_loss(fp, yp, wv, shape, {}).item(), 1e-12);
  EXPECT_NEAR(triplet_loss(fv, y, 0.3).item(), triplet_loss(fp, yp, 0.3).item(), 1e-12);
  EXPECT_NEAR(id_loss(matmul_nt(fv, flv), y).item(), id_loss(matmul_nt(fp, flv), yp).item(), 1e-12);
}

}  // namespace
}  // namespace ddrn
