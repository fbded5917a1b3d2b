#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "fanova.hpp"

using namespace cellsearch;

namespace {

HyperparamSpace unit_space(size_t d) {
  std::vector<Dim> dims;
  for (size_t i = 0; i < d; ++i) dims.push_back({"x" + std::to_string(i), DimKind::kUniform, 0.0, 1.0, {}});
  return HyperparamSpace(dims);
}

struct Sample {
  std::vector<std::vector<double>> x;
  std::vector<double> y;
};

template <class F>
Sample sample(size_t d, int n, uint64_t seed, F f) {
  Rng rng(seed);
  Sample s;
  for (int i = 0; i < n; ++i) {
    std::vector<double> u(d);
    for (double& v : u) v = rng.uniform();
    s.y.push_back(f(u));
    s.x.push_back(std::move(u));
  }
  return s;
}

TreeNode split(int dim, double threshold, int left, int right) {
  TreeNode n;
  n.dim = dim;
  n.threshold = threshold;
  n.left = left;
  n.right = right;
  return n;
}

TreeNode leaf(double v) {
  TreeNode n;
  n.value = v;
  return n;
}

// x0 <= 0.3 ? (x1 <= 0.6 ? 1 : 4) : (x2 <= 0.5 ? -2 : (x0 <= 0.8 ? 3 : 0))
RegressionTree three_dim_tree() {
  return RegressionTree(unit_space(3), {split(0, 0.3, 1, 2), split(1, 0.6, 3, 4), split(2, 0.5, 5, 6), leaf(1.0),
                                        leaf(4.0), leaf(-2.0), split(0, 0.8, 7, 8), leaf(3.0), leaf(0.0)});
}

}  // namespace

TEST_CASE("hand-built trees: marginals") {
  const RegressionTree single(unit_space(2), {leaf(2.5)});
  for (double u : {0.0, 0.3, 1.0}) {
    CHECK(single.marginal(0, u) == 2.5);
    CHECK(single.marginal(1, u) == 2.5);
  }
  CHECK(single.total_variance() == 0.0);

  const RegressionTree step(unit_space(2), {split(0, 0.25, 1, 2), leaf(1.0), leaf(5.0)});
  CHECK(step.marginal(0, 0.1) == 1.0);
  CHECK(step.marginal(0, 0.25) == 1.0);
  CHECK(step.marginal(0, 0.2500001) == 5.0);
  CHECK(step.marginal(0, 1.0) == 5.0);
  // Un-split dim: constant at the tree mean.
  CHECK(step.mean() == doctest::Approx(0.25 * 1.0 + 0.75 * 5.0).epsilon(1e-15));
  for (double u : {0.0, 0.5, 0.9}) CHECK(step.marginal(1, u) == doctest::Approx(step.mean()).epsilon(1e-15));
  CHECK(step.total_variance() == doctest::Approx(0.25 * 0.75 * 16.0).epsilon(1e-14));
  CHECK(step.main_effect(0) == doctest::Approx(step.total_variance()).epsilon(1e-14));
  CHECK(std::abs(step.main_effect(1)) < 1e-15);

  CHECK_THROWS_AS(RegressionTree(unit_space(2), {split(0, 0.5, 1, 1), leaf(0.0)}), UsageError);
  CHECK_THROWS_AS(RegressionTree(unit_space(2), {split(3, 0.5, 1, 2), leaf(0.0), leaf(1.0)}), UsageError);
}

TEST_CASE("tree marginal matches Monte-Carlo marginalization") {
  const RegressionTree t = three_dim_tree();
  Rng rng(17);
  constexpr int kSamples = 10000;
  for (size_t dim = 0; dim < 3; ++dim) {
    for (double v : {0.05, 0.3, 0.55, 0.9}) {
      double s = 0.0;
      double s2 = 0.0;
      for (int i = 0; i < kSamples; ++i) {
        std::vector<double> u{rng.uniform(), rng.uniform(), rng.uniform()};
        u[dim] = v;
        const double p = t.predict(u);
        s += p;
        s2 += p * p;
      }
      const double mean = s / kSamples;
      const double sd = std::sqrt(std::max(0.0, s2 / kSamples - mean * mean));
      const double se = sd / std::sqrt(static_cast<double>(kSamples));
      INFO("dim " << dim << " value " << v);
      CHECK(std::abs(t.marginal(dim, v) - mean) <= 3.0 * se + 1e-12);
    }
  }
}

TEST_CASE("variance decomposition of a pure interaction") {
  // 1 on the upper-right quadrant, 0 elsewhere.
  const RegressionTree t(unit_space(2), {split(0, 0.5, 1, 2), leaf(0.0), split(1, 0.5, 3, 4), leaf(0.0), leaf(1.0)});
  CHECK(t.mean() == 0.25);
  CHECK(t.total_variance() == doctest::Approx(0.1875).epsilon(1e-15));
  CHECK(t.main_effect(0) == doctest::Approx(0.0625).epsilon(1e-15));
  CHECK(t.main_effect(1) == doctest::Approx(0.0625).epsilon(1e-15));
  CHECK(t.pair_effect(0, 1) == doctest::Approx(0.0625).epsilon(1e-14));
  CHECK_THROWS_AS(t.pair_effect(1, 1), UsageError);

  const RegressionForest f(unit_space(2), {t});
  const ImportanceReport r = importance(f);
  CHECK(r.dims[0].fraction == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(r.dims[1].fraction == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].fraction == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(std::abs(r.higher_order) < 1e-12);
}

TEST_CASE("fit_forest basics") {
  const HyperparamSpace space = unit_space(2);
  const Sample s = sample(2, 40, 3, [](const std::vector<double>& u) { return std::sin(6 * u[0]) + u[1]; });
  ForestOptions opt;
  opt.seed = 9;
  const RegressionForest a = fit_forest(space, s.x, s.y, opt);
  const RegressionForest b = fit_forest(space, s.x, s.y, opt);
  REQUIRE(a.trees().size() == 16);
  for (size_t t = 0; t < a.trees().size(); ++t) {
    const auto& na = a.trees()[t].nodes();
    const auto& nb = b.trees()[t].nodes();
    REQUIRE(na.size() == nb.size());
    for (size_t i = 0; i < na.size(); ++i) {
      CHECK(na[i].dim == nb[i].dim);
      CHECK(na[i].threshold == nb[i].threshold);
      CHECK(na[i].value == nb[i].value);
    }
  }

  // Every leaf region holds training data; predictions lie within the spread
  // of the leaves that contain the point.
  for (size_t i = 0; i < s.x.size(); ++i) {
    double lo = 1e300;
    double hi = -1e300;
    for (const RegressionTree& t : a.trees()) {
      lo = std::min(lo, t.predict(s.x[i]));
      hi = std::max(hi, t.predict(s.x[i]));
    }
    const double p = a.predict(s.x[i]);
    CHECK(p >= lo - 1e-12);
    CHECK(p <= hi + 1e-12);
  }
  for (const RegressionTree& t : a.trees()) {
    for (const LeafBox& box : t.leaves()) {
      bool hit = false;
      for (const auto& x : s.x) {
        hit = hit || ((x[0] > box.lo[0] || box.lo[0] == 0.0) && x[0] <= box.hi[0] &&
                      (x[1] > box.lo[1] || box.lo[1] == 0.0) && x[1] <= box.hi[1]);
      }
      CHECK(hit);
    }
  }

  const Sample few = sample(2, 7, 1, [](const std::vector<double>& u) { return u[0]; });
  CHECK_THROWS_AS(fit_forest(space, few.x, few.y, opt), EvaluationError);
  ForestOptions bad;
  bad.n_trees = 0;
  CHECK_THROWS_AS(fit_forest(space, s.x, s.y, bad), ConfigError);
}

TEST_CASE("constant losses give single leaves and zero importance") {
  const HyperparamSpace space = unit_space(2);
  const Sample s = sample(2, 30, 4, [](const std::vector<double>&) { return 0.7; });
  const RegressionForest f = fit_forest(space, s.x, s.y, {});
  for (const RegressionTree& t : f.trees()) {
    CHECK(t.nodes().size() == 1);
    CHECK(t.total_variance() == 0.0);
  }
  const ImportanceReport r = importance(f);
  CHECK(r.zero_variance);
  CHECK(r.total_variance == 0.0);
  for (const DimImportance& d : r.dims) CHECK(d.fraction == 0.0);
}

TEST_CASE("importance of f(x, y) = x") {
  // Exact grid oracle for the true function: the x marginal carries all of
  // the variance, the y marginal is flat.
  auto truth = [](double x, double) { return x; };
  const int grid = 32;
  std::vector<double> mx(grid, 0.0);
  std::vector<double> my(grid, 0.0);
  double mean = 0.0;
  for (int i = 0; i < grid; ++i) {
    for (int k = 0; k < grid; ++k) {
      const double f = truth((i + 0.5) / grid, (k + 0.5) / grid);
      mx[i] += f / grid;
      my[k] += f / grid;
      mean += f / (grid * grid);
    }
  }
  double vx = 0.0;
  double vy = 0.0;
  double vt = 0.0;
  for (int i = 0; i < grid; ++i) {
    vx += (mx[i] - mean) * (mx[i] - mean) / grid;
    vy += (my[i] - mean) * (my[i] - mean) / grid;
    for (int k = 0; k < grid; ++k) {
      const double f = truth((i + 0.5) / grid, (k + 0.5) / grid);
      vt += (f - mean) * (f - mean) / (grid * grid);
    }
  }
  const double oracle_x = vx / vt;
  const double oracle_y = vy / vt;
  CHECK(oracle_x == doctest::Approx(1.0));

  const HyperparamSpace space = unit_space(2);
  const Sample s = sample(2, 200, 11, [](const std::vector<double>& u) { return u[0]; });
  ForestOptions opt;
  opt.seed = 2;
  const ImportanceReport r = importance(fit_forest(space, s.x, s.y, opt));
  CHECK(r.dims[0].fraction > 0.9);
  CHECK(r.dims[1].fraction < 0.1);
  CHECK(std::abs(r.dims[0].fraction - oracle_x) < 0.1);
  CHECK(std::abs(r.dims[1].fraction - oracle_y) < 0.1);
  CHECK(r.dims[0].curve.size() == 32);
  CHECK(r.dims[0].curve.front().value == 0.0);
  CHECK(r.dims[0].curve.back().value == 1.0);
  CHECK(r.dims[0].curve.front().mean < r.dims[0].curve.back().mean);
}

TEST_CASE("importance of a symmetric sum") {
  const HyperparamSpace space = unit_space(2);
  const Sample s = sample(2, 200, 12, [](const std::vector<double>& u) { return u[0] + u[1]; });
  const ImportanceReport r = importance(fit_forest(space, s.x, s.y, {}));
  CHECK(std::abs(r.dims[0].fraction - r.dims[1].fraction) < 0.15);
}

TEST_CASE("fractions sum to one per tree and are affine invariant") {
  const HyperparamSpace space = unit_space(3);
  const Sample s = sample(3, 80, 13, [](const std::vector<double>& u) { return u[0] * u[1] + 0.3 * u[2] * u[2]; });
  ForestOptions opt;
  opt.seed = 5;
  const RegressionForest f = fit_forest(space, s.x, s.y, opt);
  for (const RegressionTree& t : f.trees()) {
    const double v = t.total_variance();
    REQUIRE(v > 0.0);
    double singles = 0.0;
    double pairs = 0.0;
    for (size_t i = 0; i < 3; ++i) {
      CHECK(t.main_effect(i) >= 0.0);
      singles += t.main_effect(i);
    }
    for (size_t a = 0; a < 3; ++a) {
      for (size_t b = a + 1; b < 3; ++b) {
        CHECK(t.pair_effect(a, b) >= -1e-12 * v);
        pairs += t.pair_effect(a, b);
      }
    }
    CHECK(singles + pairs <= v * (1.0 + 1e-9));
  }
  const ImportanceReport r = importance(f);
  double total = r.higher_order;
  for (const DimImportance& d : r.dims) total += d.fraction;
  for (const PairImportance& p : r.pairs) total += p.fraction;
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

  std::vector<double> scaled = s.y;
  for (double& y : scaled) y = 4.0 * y - 7.0;
  const ImportanceReport rs = importance(fit_forest(space, s.x, scaled, opt));
  for (size_t i = 0; i < 3; ++i) CHECK(rs.dims[i].fraction == doctest::Approx(r.dims[i].fraction).epsilon(1e-9));

  // Two dims: singles plus the pair account for everything.
  const Sample s2 = sample(2, 60, 14, [](const std::vector<double>& u) { return u[0] * u[1]; });
  const RegressionForest f2 = fit_forest(unit_space(2), s2.x, s2.y, {});
  for (const RegressionTree& t : f2.trees()) {
    const double v = t.total_variance();
    CHECK(std::abs(t.main_effect(0) + t.main_effect(1) + t.pair_effect(0, 1) - v) < 1e-9 * v);
  }
}

TEST_CASE("categorical and log dims") {
  const HyperparamSpace space({{"opt", DimKind::kCategorical, 0, 0, {"a", "b", "c", "d"}},
                               {"lr", DimKind::kLogUniform, 1e-4, 1e-1, {}}});
  Rng rng(8);
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  const double shift[4] = {0.0, 2.0, 0.5, 1.0};
  for (int i = 0; i < 120; ++i) {
    const ConfigVector c = space.sample_uniform(rng);
    x.push_back(space.to_unit(c));
    y.push_back(shift[static_cast<int>(c[0])] + 0.05 * std::log10(c[1]));
  }
  const RegressionForest f = fit_forest(space, x, y, {});
  const ImportanceReport r = importance(f);
  CHECK(r.dims[0].fraction > 0.9);
  CHECK(r.dims[0].curve.size() == 4);
  CHECK(r.dims[1].curve.size() == 32);
  CHECK(r.dims[1].curve.front().value == doctest::Approx(1e-4));
  CHECK(r.dims[1].curve.back().value == doctest::Approx(1e-1));
  CHECK(f.marginal(0, 1.0).first > f.marginal(0, 0.0).first);
  CHECK_THROWS_AS(f.marginal(0, 4.0), UsageError);
  CHECK_THROWS_AS(f.marginal(1, 0.5), UsageError);
  CHECK_THROWS_AS(f.marginal(2, 0.0), UsageError);
  CHECK_NOTHROW(f.marginal(1, 1e-3));
}

TEST_CASE("analysis of a trial log") {
  const HyperparamSpace space = unit_space(2);
  TrialLog log;
  log.space = space;
  Rng rng(21);
  long id = 0;
  for (int i = 0; i < 30; ++i) {
    TrialRecord t;
    t.config_id = id++;
    t.config = space.sample_uniform(rng);
    t.budget = 1.0;
    t.loss = t.config[0];
    log.trials.push_back(t);
  }
  for (int i = 0; i < 5; ++i) {
    TrialRecord t = log.trials[i];
    t.budget = 3.0;
    log.trials.push_back(t);
  }
  TrialRecord failed = log.trials[0];
  failed.status = TrialStatus::kFailed;
  failed.loss = std::numeric_limits<double>::infinity();
  log.trials.push_back(failed);

  const auto reports = analyze_trials(log, {});
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].budget == 1.0);
  CHECK(reports[0].n_trials == 30);
  CHECK_THROWS_AS(fit_forest(log.trials, 3.0, space, {}), EvaluationError);

  const nlohmann::json j = reports[0].to_json();
  for (const char* key : {"budget", "n_trials", "n_trees", "total_variance", "zero_variance", "importance", "interactions"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["importance"][0]["dim"] == "x0");
  std::ostringstream csv;
  reports[0].write_curves_csv(csv);
  const std::string text = csv.str();
  CHECK(text.rfind("dim,value,mean,std\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 32 * 2);
}
