#include "doctest.h"
#include "ops.hpp"
#include "test_util.hpp"

using namespace cellsearch;
using testutil::kink_free;
using testutil::l2_to;
using testutil::target_near;

namespace {

double corr_oracle(const Tensor& l, const Tensor& r, int n, int d, int h, int w) {
  const int C = l.shape().c;
  if (w - d < 0) return 0.0;
  double acc = 0.0;
  for (int c = 0; c < C; ++c) acc += l.at(n, c, h, w) * r.at(n, c, h, w - d);
  return acc / C;
}

// Gradient check of `f` at x with a near target; retries draws whose
// pre-activations or pooling windows sit too close to a kink.
template <typename F>
double check_op(F&& f, Shape s, Rng& rng) {
  const Tensor x = kink_free(s, rng, 0.1);
  const Tensor target = target_near(f(x), rng);
  return grad_check([&](const Tensor& v) { return l2_to(f(v), target); }, x);
}

}  // namespace

TEST_CASE("op names round trip") {
  for (CandidateOpKind k : kAllCandidateOps) CHECK(op_from_name(op_name(k)) == k);
  CHECK(kAllCandidateOps.size() == 8);
  try {
    op_from_name("conv_9x9");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("conv_9x9") != std::string::npos);
  }
}

TEST_CASE("zero and skip") {
  Rng rng(1);
  const Tensor x = Tensor::randn({2, 3, 8, 8}, rng);
  const Tensor z = apply_candidate(make_op(CandidateOpKind::kZero, 3, 1, rng), x);
  CHECK(z.shape() == x.shape());
  for (double v : z.values()) CHECK(v == 0.0);
  const Tensor z2 = apply_candidate(make_op(CandidateOpKind::kZero, 3, 2, rng), x);
  CHECK(z2.shape() == Shape{2, 3, 4, 4});
  for (double v : z2.values()) CHECK(v == 0.0);
  CHECK(testutil::bit_equal(apply_candidate(make_op(CandidateOpKind::kSkip, 3, 1, rng), x), x));
  CHECK(apply_candidate(make_op(CandidateOpKind::kSkip, 3, 2, rng), x).shape() == Shape{2, 3, 4, 4});
}

TEST_CASE("every candidate op keeps shape contracts") {
  Rng rng(2);
  const Tensor x = Tensor::randn({1, 4, 8, 8}, rng);
  for (CandidateOpKind k : kAllCandidateOps) {
    CHECK(apply_candidate(make_op(k, 4, 1, rng), x).shape() == Shape{1, 4, 8, 8});
    CHECK(apply_candidate(make_op(k, 4, 2, rng), x).shape() == Shape{1, 4, 4, 4});
    CHECK_THROWS_AS(apply_candidate(make_op(k, 3, 1, rng), x), ShapeError);
  }
}

TEST_CASE("candidate op gradients") {
  Rng rng(3);
  for (bool affine : {false, true}) {
    for (CandidateOpKind k : kAllCandidateOps) {
      if (k == CandidateOpKind::kZero) continue;
      for (int stride : {1, 2}) {
        CAPTURE(op_name(k));
        CAPTURE(stride);
        CAPTURE(affine);
        const OpInstance op = make_op(k, 3, stride, rng, affine);
        auto f = [&](const Tensor& v) { return apply_candidate(op, v); };
        CHECK(check_op(f, {2, 3, 8, 8}, rng) < 1e-5);
        for (size_t wi = 0; wi < op.weights.size(); ++wi) {
          const Tensor x = kink_free({2, 3, 8, 8}, rng, 0.1);
          const Tensor target = target_near(f(x), rng);
          OpInstance probe = op;
          auto g = [&](const Tensor& w) {
            probe.weights[wi] = w;
            return l2_to(apply_candidate(probe, x), target);
          };
          CHECK(grad_check(g, op.weights[wi]) < 1e-5);
        }
      }
    }
  }
}

TEST_CASE("correlation1d matches the brute-force oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor l = Tensor::randn({2, 4, 8, 16}, rng);
    const Tensor r = Tensor::randn({2, 4, 8, 16}, rng);
    const int D = 1 + static_cast<int>(rng.below(8));
    const Tensor out = correlation1d(l, r, D);
    REQUIRE(out.shape() == Shape{2, D + 1, 8, 16});
    double worst = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int d = 0; d <= D; ++d)
        for (int h = 0; h < 8; ++h)
          for (int w = 0; w < 16; ++w) worst = std::max(worst, std::abs(out.at(n, d, h, w) - corr_oracle(l, r, n, d, h, w)));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("correlation1d special inputs") {
  Rng rng(5);
  const Tensor l = Tensor::randn({1, 3, 4, 12}, rng);
  SUBCASE("identical inputs") {
    const Tensor out = correlation1d(l, l, 3);
    for (int h = 0; h < 4; ++h)
      for (int w = 0; w < 12; ++w) {
        double ms = 0.0;
        for (int c = 0; c < 3; ++c) ms += l.at(0, c, h, w) * l.at(0, c, h, w);
        CHECK(out.at(0, 0, h, w) == doctest::Approx(ms / 3).epsilon(1e-14));
      }
  }
  SUBCASE("shifted input peaks at the shift") {
    const int k = 2;
    Tensor r = Tensor::zeros(l.shape());
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w + k < 12; ++w) r.at(0, c, h, w) = l.at(0, c, h, w + k);
    const Tensor self = correlation1d(l, l, 0);
    const Tensor out = correlation1d(l, r, 4);
    for (int h = 0; h < 4; ++h)
      for (int w = k; w < 12; ++w) CHECK(out.at(0, k, h, w) == doctest::Approx(self.at(0, 0, h, w)).epsilon(1e-14));
  }
  SUBCASE("zeros") {
    const Tensor out = correlation1d(Tensor::zeros(l.shape()), Tensor::zeros(l.shape()), 3);
    for (double v : out.values()) CHECK(v == 0.0);
  }
  SUBCASE("displacement too large") { CHECK_THROWS_AS(correlation1d(l, l, 12), ConfigError); }
}

TEST_CASE("correlation1d gradient") {
  Rng rng(6);
  const Tensor r = Tensor::randn({2, 4, 4, 8}, rng);
  const Tensor l = Tensor::randn({2, 4, 4, 8}, rng);
  CHECK(check_op([&](const Tensor& v) { return correlation1d(v, r, 3); }, {2, 4, 4, 8}, rng) < 1e-5);
  CHECK(check_op([&](const Tensor& v) { return correlation1d(l, v, 3); }, {2, 4, 4, 8}, rng) < 1e-5);
}

TEST_CASE("warp_horizontal") {
  Rng rng(7);
  const Tensor img = Tensor::randn({1, 2, 4, 10}, rng);
  SUBCASE("zero disparity is the identity") {
    CHECK(testutil::bit_equal(warp_horizontal(img, Tensor::zeros({1, 1, 4, 10})), img));
  }
  SUBCASE("integer disparity shifts with zero fill") {
    const int k = 3;
    const Tensor out = warp_horizontal(img, Tensor::full({1, 1, 4, 10}, k));
    for (int c = 0; c < 2; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 10; ++w) CHECK(out.at(0, c, h, w) == (w - k >= 0 ? img.at(0, c, h, w - k) : 0.0));
  }
  SUBCASE("gradients at non-integer disparities") {
    Tensor disp({1, 1, 4, 10});
    for (size_t i = 0; i < disp.numel(); ++i) disp[i] = std::floor(rng.uniform(0.0, 4.0)) + rng.uniform(0.2, 0.8);
    const Tensor target = target_near(warp_horizontal(img, disp), rng);
    CHECK(grad_check([&](const Tensor& d) { return l2_to(warp_horizontal(img, d), target); }, disp) < 1e-4);
    CHECK(grad_check([&](const Tensor& v) { return l2_to(warp_horizontal(v, disp), target); }, img) < 1e-5);
  }
  SUBCASE("shape mismatch") { CHECK_THROWS_AS(warp_horizontal(img, Tensor::zeros({1, 1, 4, 9})), ShapeError); }
}

TEST_CASE("epe") {
  Rng rng(8);
  const Tensor gt = Tensor::uniform({2, 1, 4, 6}, rng, 0.0, 8.0);
  CHECK(epe(gt, gt).item() == 0.0);
  Tensor plus = gt.clone();
  for (size_t i = 0; i < plus.numel(); ++i) plus[i] += 1.0;
  CHECK(epe(plus, gt).item() == doctest::Approx(1.0).epsilon(1e-14));

  const Tensor pred = Tensor::uniform({2, 1, 4, 6}, rng, 0.0, 8.0);
  Tensor mask({2, 1, 4, 6});
  for (size_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.7 ? 1.0 : 0.0;
  double acc = 0.0;
  int count = 0;
  for (size_t i = 0; i < pred.numel(); ++i) {
    if (mask[i] > 0.5) {
      acc += std::abs(pred[i] - gt[i]);
      ++count;
    }
  }
  CHECK(std::abs(epe(pred, gt, &mask).item() - acc / count) < 1e-12);
  CHECK(epe(pred, gt, &mask).item() >= 0.0);
  CHECK_THROWS_AS(epe(pred, gt, &(mask = Tensor::zeros(mask.shape()))), EvaluationError);
}

TEST_CASE("multiscale epe") {
  Rng rng(9);
  const Tensor gt = Tensor::uniform({1, 1, 8, 8}, rng, 0.0, 8.0);
  SUBCASE("single full-resolution scale equals epe") {
    const Tensor pred = Tensor::uniform({1, 1, 8, 8}, rng, 0.0, 8.0);
    const ScaledPrediction p[1] = {{pred, 1}};
    const double w[1] = {1.0};
    CHECK(multiscale_epe(p, gt, w).item() == doctest::Approx(epe(pred, gt).item()).epsilon(1e-15));
  }
  SUBCASE("perfect predictions") {
    const ScaledPrediction p[2] = {{downsample_disparity(gt, 4), 4}, {downsample_disparity(gt, 2), 2}};
    const double w[2] = {1.0, 1.0};
    CHECK(multiscale_epe(p, gt, w).item() == 0.0);
  }
  SUBCASE("two scales against a loop oracle") {
    const Tensor p4 = Tensor::uniform({1, 1, 2, 2}, rng, 0.0, 2.0);
    const Tensor p2 = Tensor::uniform({1, 1, 4, 4}, rng, 0.0, 4.0);
    auto scale_err = [&](const Tensor& p, int f) {
      const int h = 8 / f;
      double acc = 0.0;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < h; ++j) {
          double g = 0.0;
          for (int a = 0; a < f; ++a)
            for (int b = 0; b < f; ++b) g += gt.at(0, 0, i * f + a, j * f + b);
          g /= f * f * f;
          acc += std::abs(p.at(0, 0, i, j) - g);
        }
      return acc / (h * h);
    };
    const ScaledPrediction p[2] = {{p4, 4}, {p2, 2}};
    const double w[2] = {1.0, 0.5};
    const double oracle = scale_err(p4, 4) + 0.5 * scale_err(p2, 2);
    CHECK(std::abs(multiscale_epe(p, gt, w).item() - oracle) < 1e-12);
  }
  SUBCASE("mismatches") {
    const ScaledPrediction p[1] = {{Tensor::zeros({1, 1, 3, 3}), 2}};
    const double w1[1] = {1.0};
    const double w2[2] = {1.0, 1.0};
    CHECK_THROWS_AS(multiscale_epe(p, gt, w1), ConfigError);
    const ScaledPrediction q[1] = {{Tensor::zeros({1, 1, 4, 4}), 2}};
    CHECK_THROWS_AS(multiscale_epe(q, gt, w2), ConfigError);
  }
  SUBCASE("gradient") {
    Tensor p2 = Tensor::uniform({1, 1, 4, 4}, rng, 0.0, 4.0);
    const Tensor p4 = Tensor::uniform({1, 1, 2, 2}, rng, 0.0, 2.0);
    const double w[2] = {1.0, 0.5};
    auto f = [&](const Tensor& v) {
      const ScaledPrediction p[2] = {{p4, 4}, {v, 2}};
      return multiscale_epe(p, gt, w);
    };
    CHECK(grad_check(f, p2) < 1e-5);
  }
}
