#include "fanova.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

namespace cellsearch {

using nlohmann::json;

namespace {

uint64_t all_categories(int k) { return k >= 64 ? ~0ULL : (1ULL << k) - 1; }

int category_of(double u, int k) { return std::clamp(static_cast<int>(u * k), 0, k - 1); }

std::vector<int> cardinalities(const HyperparamSpace& space) {
  std::vector<int> out;
  for (const Dim& d : space.dims()) {
    const int k = d.categorical() ? static_cast<int>(d.categories.size()) : 0;
    if (k > 64) throw ConfigError("dim '" + d.name + "' has more than 64 categories");
    out.push_back(k);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tree

RegressionTree::RegressionTree(const HyperparamSpace& space, std::vector<TreeNode> nodes)
    : cards_(cardinalities(space)), nodes_(std::move(nodes)) {
  if (nodes_.empty()) throw UsageError("tree needs at least one node");
  const size_t d = space.size();
  LeafBox root;
  root.lo.assign(d, 0.0);
  root.hi.assign(d, 1.0);
  root.categories.assign(d, 0);
  for (size_t k = 0; k < d; ++k) {
    if (cards_[k] > 0) root.categories[k] = all_categories(cards_[k]);
  }
  std::vector<std::pair<int, LeafBox>> stack{{0, root}};
  size_t visited = 0;
  while (!stack.empty()) {
    auto [id, box] = std::move(stack.back());
    stack.pop_back();
    if (id < 0 || id >= static_cast<int>(nodes_.size()) || ++visited > nodes_.size()) {
      throw UsageError("tree nodes do not form a tree");
    }
    const TreeNode& n = nodes_[id];
    if (n.leaf()) {
      box.value = n.value;
      leaves_.push_back(std::move(box));
      continue;
    }
    if (static_cast<size_t>(n.dim) >= d) throw UsageError("tree node splits a dim outside the space");
    LeafBox left = box;
    LeafBox right = std::move(box);
    if (cards_[n.dim] > 0) {
      left.categories[n.dim] &= n.left_categories;
      right.categories[n.dim] &= ~n.left_categories;
    } else {
      left.hi[n.dim] = std::min(left.hi[n.dim], n.threshold);
      right.lo[n.dim] = std::max(right.lo[n.dim], n.threshold);
    }
    stack.emplace_back(n.right, std::move(right));
    stack.emplace_back(n.left, std::move(left));
  }

  double total_volume = 0.0;
  for (const LeafBox& b : leaves_) {
    double vol = 1.0;
    for (size_t k = 0; k < d; ++k) vol *= fraction(b, k);
    mean_ += vol * b.value;
    total_volume += vol;
  }
  if (std::abs(total_volume - 1.0) > 1e-9) throw UsageError("tree leaves do not partition the unit cube");
  for (const LeafBox& b : leaves_) {
    double vol = 1.0;
    for (size_t k = 0; k < d; ++k) vol *= fraction(b, k);
    variance_ += vol * (b.value - mean_) * (b.value - mean_);
  }
}

double RegressionTree::fraction(const LeafBox& b, size_t dim) const {
  if (cards_[dim] > 0) return static_cast<double>(std::popcount(b.categories[dim])) / cards_[dim];
  return std::max(0.0, std::clamp(b.hi[dim], 0.0, 1.0) - std::clamp(b.lo[dim], 0.0, 1.0));
}

bool RegressionTree::covers(const LeafBox& b, size_t dim, double u) const {
  if (cards_[dim] > 0) return (b.categories[dim] >> category_of(u, cards_[dim])) & 1ULL;
  return (u > b.lo[dim] || (b.lo[dim] <= 0.0 && u >= 0.0)) && u <= b.hi[dim];
}

double RegressionTree::predict(std::span<const double> u) const {
  int id = 0;
  while (!nodes_[id].leaf()) {
    const TreeNode& n = nodes_[id];
    const bool left = cards_[n.dim] > 0 ? ((n.left_categories >> category_of(u[n.dim], cards_[n.dim])) & 1ULL)
                                        : u[n.dim] <= n.threshold;
    id = left ? n.left : n.right;
  }
  return nodes_[id].value;
}

double RegressionTree::marginal(size_t dim, double u) const {
  double m = 0.0;
  for (const LeafBox& b : leaves_) {
    if (!covers(b, dim, u)) continue;
    double w = 1.0;
    for (size_t k = 0; k < cards_.size(); ++k) {
      if (k != dim) w *= fraction(b, k);
    }
    m += w * b.value;
  }
  return m;
}

std::vector<RegressionTree::Cell> RegressionTree::cells(size_t dim) const {
  std::vector<Cell> out;
  if (cards_[dim] > 0) {
    for (int c = 0; c < cards_[dim]; ++c) out.push_back({1.0 / cards_[dim], (c + 0.5) / cards_[dim]});
    return out;
  }
  std::vector<double> cuts{0.0, 1.0};
  for (const TreeNode& n : nodes_) {
    if (!n.leaf() && static_cast<size_t>(n.dim) == dim && n.threshold > 0.0 && n.threshold < 1.0) {
      cuts.push_back(n.threshold);
    }
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  for (size_t i = 0; i + 1 < cuts.size(); ++i) out.push_back({cuts[i + 1] - cuts[i], cuts[i + 1]});
  return out;
}

double RegressionTree::main_effect(size_t dim) const {
  double v = 0.0;
  for (const Cell& c : cells(dim)) {
    const double m = marginal(dim, c.probe);
    v += c.width * (m - mean_) * (m - mean_);
  }
  return v;
}

double RegressionTree::pair_effect(size_t a, size_t b) const {
  if (a == b) throw UsageError("pair effect needs two different dims");
  double v = 0.0;
  for (const Cell& ca : cells(a)) {
    for (const Cell& cb : cells(b)) {
      double m = 0.0;
      for (const LeafBox& box : leaves_) {
        if (!covers(box, a, ca.probe) || !covers(box, b, cb.probe)) continue;
        double w = 1.0;
        for (size_t k = 0; k < cards_.size(); ++k) {
          if (k != a && k != b) w *= fraction(box, k);
        }
        m += w * box.value;
      }
      v += ca.width * cb.width * (m - mean_) * (m - mean_);
    }
  }
  return v - main_effect(a) - main_effect(b);
}

// ---------------------------------------------------------------------------
// Fitting

void ForestOptions::validate() const {
  if (n_trees < 1) throw ConfigError("forest needs at least one tree");
  if (!(max_features > 0.0 && max_features <= 1.0)) throw ConfigError("max_features must lie in (0, 1]");
  if (min_leaf < 1) throw ConfigError("min_leaf must be at least 1");
}

namespace {

struct Split {
  int dim = -1;
  double threshold = 0.0;
  uint64_t left_categories = 0;
  double gain = 0.0;
};

class TreeBuilder {
 public:
  TreeBuilder(const std::vector<int>& cards, const std::vector<std::vector<double>>& x, const std::vector<double>& y,
              const ForestOptions& opt, Rng& rng)
      : cards_(cards), x_(x), y_(y), opt_(opt), rng_(rng) {}

  std::vector<TreeNode> build(std::vector<size_t> idx) {
    grow(std::move(idx));
    return std::move(nodes_);
  }

 private:
  int grow(std::vector<size_t> idx) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    double sum = 0.0;
    for (size_t i : idx) sum += y_[i];
    nodes_[id].value = sum / static_cast<double>(idx.size());
    const auto [lo, hi] = std::minmax_element(idx.begin(), idx.end(), [&](size_t a, size_t b) { return y_[a] < y_[b]; });
    if (idx.size() < 2 * static_cast<size_t>(opt_.min_leaf) || y_[*lo] == y_[*hi]) return id;

    const size_t d = cards_.size();
    std::vector<size_t> dims(d);
    std::iota(dims.begin(), dims.end(), 0);
    const size_t tries = std::max<size_t>(1, static_cast<size_t>(std::ceil(opt_.max_features * d - 1e-12)));
    for (size_t i = 0; i < tries; ++i) std::swap(dims[i], dims[i + rng_.below(d - i)]);

    Split best;
    for (size_t i = 0; i < tries; ++i) {
      const Split s = cards_[dims[i]] > 0 ? categorical_split(idx, dims[i]) : ordered_split(idx, dims[i]);
      if (s.dim >= 0 && better(s.gain, best.gain)) best = s;
    }
    if (best.dim < 0) return id;

    std::vector<size_t> left;
    std::vector<size_t> right;
    for (size_t i : idx) (goes_left(best, x_[i]) ? left : right).push_back(i);
    nodes_[id].dim = best.dim;
    nodes_[id].threshold = best.threshold;
    nodes_[id].left_categories = best.left_categories;
    const int l = grow(std::move(left));
    nodes_[id].left = l;
    const int r = grow(std::move(right));
    nodes_[id].right = r;
    return id;
  }

  bool goes_left(const Split& s, const std::vector<double>& u) const {
    if (cards_[s.dim] > 0) return (s.left_categories >> category_of(u[s.dim], cards_[s.dim])) & 1ULL;
    return u[s.dim] <= s.threshold;
  }

  // Reduction of the squared error, written without the cancelling sum^2/n
  // terms.
  static double gain(double sl, double nl, double sr, double nr) {
    const double d = sl / nl - sr / nr;
    return nl * nr / (nl + nr) * d * d;
  }

  // Splits that separate the same samples have equal gains up to summation
  // order; the first candidate wins such ties.
  static bool better(double g, double best) { return g > best * (1.0 + 1e-9) && g > 1e-12; }

  Split ordered_split(std::vector<size_t> idx, size_t dim) const {
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return x_[a][dim] < x_[b][dim]; });
    double total = 0.0;
    for (size_t i : idx) total += y_[i];
    const size_t n = idx.size();
    const size_t m = static_cast<size_t>(opt_.min_leaf);
    Split best;
    double left = 0.0;
    for (size_t k = 0; k + 1 < n; ++k) {
      left += y_[idx[k]];
      const double a = x_[idx[k]][dim];
      const double b = x_[idx[k + 1]][dim];
      if (k + 1 < m || n - k - 1 < m || !(a < b)) continue;
      const double g = gain(left, static_cast<double>(k + 1), total - left, static_cast<double>(n - k - 1));
      if (better(g, best.gain)) best = {static_cast<int>(dim), 0.5 * (a + b), 0, g};
    }
    return best;
  }

  // Categories ordered by mean response; the best prefix goes left. Categories
  // absent from the node go right.
  Split categorical_split(const std::vector<size_t>& idx, size_t dim) const {
    const int k = cards_[dim];
    std::vector<double> sum(k, 0.0);
    std::vector<double> count(k, 0.0);
    for (size_t i : idx) {
      const int c = category_of(x_[i][dim], k);
      sum[c] += y_[i];
      count[c] += 1.0;
    }
    std::vector<int> present;
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0.0) present.push_back(c);
    }
    std::sort(present.begin(), present.end(), [&](int a, int b) {
      const double ma = sum[a] / count[a];
      const double mb = sum[b] / count[b];
      return ma != mb ? ma < mb : a < b;
    });
    double total = 0.0;
    for (size_t i : idx) total += y_[i];
    const double n = static_cast<double>(idx.size());
    Split best;
    double sl = 0.0;
    double nl = 0.0;
    uint64_t mask = 0;
    for (size_t p = 0; p + 1 < present.size(); ++p) {
      sl += sum[present[p]];
      nl += count[present[p]];
      mask |= 1ULL << present[p];
      if (nl < opt_.min_leaf || n - nl < opt_.min_leaf) continue;
      const double g = gain(sl, nl, total - sl, n - nl);
      if (better(g, best.gain)) best = {static_cast<int>(dim), 0.0, mask, g};
    }
    return best;
  }

  const std::vector<int>& cards_;
  const std::vector<std::vector<double>>& x_;
  const std::vector<double>& y_;
  const ForestOptions& opt_;
  Rng& rng_;
  std::vector<TreeNode> nodes_;
};

}  // namespace

RegressionForest::RegressionForest(HyperparamSpace space, std::vector<RegressionTree> trees)
    : space_(std::move(space)), trees_(std::move(trees)) {
  if (trees_.empty()) throw UsageError("forest needs at least one tree");
}

double RegressionForest::predict(const ConfigVector& c) const {
  const std::vector<double> u = space_.to_unit(c);
  double s = 0.0;
  for (const RegressionTree& t : trees_) s += t.predict(u);
  return s / static_cast<double>(trees_.size());
}

std::pair<double, double> RegressionForest::marginal(size_t dim, double value) const {
  if (dim >= space_.size()) throw UsageError("marginal dim out of range");
  const Dim& d = space_.dims()[dim];
  const double hi = d.categorical() ? static_cast<double>(d.categories.size()) - 1.0 : d.high;
  const double lo = d.categorical() ? 0.0 : d.low;
  if (!(value >= lo && value <= hi)) {
    throw UsageError("marginal value " + std::to_string(value) + " outside the range of '" + d.name + "'");
  }
  // Map through a full config so that log and integer dims use the space's own
  // unit-cube transform.
  ConfigVector c(space_.size());
  for (size_t k = 0; k < space_.size(); ++k) c[k] = space_.dims()[k].categorical() ? 0.0 : space_.dims()[k].low;
  c[dim] = value;
  const double u = space_.to_unit(c)[dim];
  double s = 0.0;
  double s2 = 0.0;
  for (const RegressionTree& t : trees_) {
    const double m = t.marginal(dim, u);
    s += m;
    s2 += m * m;
  }
  const double n = static_cast<double>(trees_.size());
  const double mean = s / n;
  return {mean, std::max(0.0, s2 / n - mean * mean)};
}

RegressionForest fit_forest(const HyperparamSpace& space, const std::vector<std::vector<double>>& x,
                            const std::vector<double>& y, const ForestOptions& opt) {
  opt.validate();
  if (x.size() != y.size()) throw UsageError("forest inputs and targets differ in length");
  if (x.size() < static_cast<size_t>(kMinForestTrials)) {
    throw EvaluationError("forest needs at least " + std::to_string(kMinForestTrials) + " finished trials, got " +
                          std::to_string(x.size()));
  }
  for (size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != space.size()) throw UsageError("forest input has the wrong dimension");
    if (!std::isfinite(y[i])) throw UsageError("forest targets must be finite");
  }
  // Trees grow on standardized targets so that split choices do not depend on
  // the loss scale; leaves are mapped back afterwards.
  const double n = static_cast<double>(y.size());
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double var = 0.0;
  for (double v : y) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> z(y.size(), 0.0);
  if (sd > 0.0) {
    for (size_t i = 0; i < y.size(); ++i) z[i] = (y[i] - mean) / sd;
  }
  const std::vector<int> cards = cardinalities(space);
  std::vector<RegressionTree> trees;
  for (int t = 0; t < opt.n_trees; ++t) {
    Rng rng(derive_seed(opt.seed, static_cast<uint64_t>(t)));
    std::vector<size_t> idx(x.size());
    for (size_t& i : idx) i = rng.below(x.size());
    TreeBuilder builder(cards, x, z, opt, rng);
    std::vector<TreeNode> nodes = builder.build(std::move(idx));
    for (TreeNode& node : nodes) node.value = mean + sd * node.value;
    trees.emplace_back(space, std::move(nodes));
  }
  return RegressionForest(space, std::move(trees));
}

RegressionForest fit_forest(std::span<const TrialRecord> trials, double budget, const HyperparamSpace& space,
                            const ForestOptions& opt) {
  std::vector<std::vector<double>> x;
  std::vector<double> y;
  for (const TrialRecord& t : trials) {
    if (t.budget != budget || t.status != TrialStatus::kFinished) continue;
    x.push_back(space.to_unit(t.config));
    y.push_back(t.loss);
  }
  if (x.size() < static_cast<size_t>(kMinForestTrials)) {
    throw EvaluationError("budget " + std::to_string(budget) + " has " + std::to_string(x.size()) +
                          " finished trials; the forest needs at least " + std::to_string(kMinForestTrials));
  }
  return fit_forest(space, x, y, opt);
}

// ---------------------------------------------------------------------------
// Importance

ImportanceReport importance(const RegressionForest& forest, int grid) {
  if (grid < 2) throw ConfigError("marginal grid needs at least two points");
  const HyperparamSpace& space = forest.space();
  const size_t d = space.size();
  ImportanceReport rep;
  rep.n_trees = static_cast<int>(forest.trees().size());

  std::vector<std::vector<double>> single(d);
  std::map<std::pair<size_t, size_t>, std::vector<double>> pairs;
  std::vector<double> higher;
  for (const RegressionTree& t : forest.trees()) {
    const double v = t.total_variance();
    rep.total_variance += v / rep.n_trees;
    if (!(v > 0.0)) continue;
    double rest = 1.0;
    for (size_t i = 0; i < d; ++i) {
      single[i].push_back(t.main_effect(i) / v);
      rest -= single[i].back();
    }
    for (size_t a = 0; a < d; ++a) {
      for (size_t b = a + 1; b < d; ++b) {
        const double f = t.pair_effect(a, b) / v;
        pairs[{a, b}].push_back(f);
        rest -= f;
      }
    }
    higher.push_back(rest);
  }
  rep.zero_variance = higher.empty();

  auto mean_std = [](const std::vector<double>& v) {
    if (v.empty()) return std::pair{0.0, 0.0};
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
  };

  for (size_t i = 0; i < d; ++i) {
    const Dim& dim = space.dims()[i];
    DimImportance di;
    di.name = dim.name;
    std::tie(di.fraction, di.std) = mean_std(single[i]);
    std::vector<double> values;
    if (dim.categorical()) {
      for (size_t c = 0; c < dim.categories.size(); ++c) values.push_back(static_cast<double>(c));
    } else {
      for (int g = 0; g < grid; ++g) {
        std::vector<double> u(d, 0.0);
        u[i] = static_cast<double>(g) / (grid - 1);
        const double v = space.from_unit(u)[i];
        if (values.empty() || v != values.back()) values.push_back(v);
      }
    }
    for (double v : values) {
      const auto [m, var] = forest.marginal(i, v);
      di.curve.push_back({v, m, std::sqrt(var)});
    }
    rep.dims.push_back(std::move(di));
  }
  for (const auto& [ab, fs] : pairs) rep.pairs.push_back({ab.first, ab.second, mean_std(fs).first});
  rep.higher_order = mean_std(higher).first;
  return rep;
}

json ImportanceReport::to_json() const {
  json j;
  j["budget"] = budget;
  j["n_trials"] = n_trials;
  j["n_trees"] = n_trees;
  j["total_variance"] = total_variance;
  j["zero_variance"] = zero_variance;
  j["importance"] = json::array();
  for (const DimImportance& d : dims) j["importance"].push_back({{"dim", d.name}, {"fraction", d.fraction}, {"std", d.std}});
  json detail;
  detail["pairs"] = json::array();
  for (const PairImportance& p : pairs) {
    detail["pairs"].push_back({{"dims", {dims.at(p.a).name, dims.at(p.b).name}}, {"fraction", p.fraction}});
  }
  detail["higher_order"] = higher_order;
  j["interactions"] = detail;
  return j;
}

void ImportanceReport::write_curves_csv(std::ostream& os) const {
  os << "dim,value,mean,std\n";
  char buf[128];
  for (const DimImportance& d : dims) {
    for (const MarginalPoint& p : d.curve) {
      std::snprintf(buf, sizeof(buf), ",%.17g,%.17g,%.17g\n", p.value, p.mean, p.std);
      os << d.name << buf;
    }
  }
}

std::vector<ImportanceReport> analyze_trials(const TrialLog& log, const ForestOptions& opt, int grid) {
  std::map<double, size_t> finished;
  for (const TrialRecord& t : log.trials) {
    if (t.status == TrialStatus::kFinished) ++finished[t.budget];
  }
  std::vector<ImportanceReport> out;
  for (const auto& [budget, n] : finished) {
    if (n < static_cast<size_t>(kMinForestTrials)) continue;
    ImportanceReport r = importance(fit_forest(log.trials, budget, log.space, opt), grid);
    r.budget = budget;
    r.n_trials = n;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cellsearch
