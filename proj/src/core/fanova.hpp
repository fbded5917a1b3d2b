#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bohb.hpp"

namespace cellsearch {

/// Internal node when dim >= 0. Ordered dims go left when u <= threshold,
/// categorical dims when the bit of the category is set in left_categories.
struct TreeNode {
  int dim = -1;
  double threshold = 0.0;
  uint64_t left_categories = 0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf mean
  bool leaf() const { return dim < 0; }
};

/// Axis-aligned leaf region in unit-cube coordinates. Ordered dims cover
/// (lo, hi], with lo == 0 closed.
struct LeafBox {
  std::vector<double> lo;
  std::vector<double> hi;
  std::vector<uint64_t> categories;
  double value = 0.0;
};

class RegressionTree {
 public:
  RegressionTree() = default;
  RegressionTree(const HyperparamSpace& space, std::vector<TreeNode> nodes);

  double predict(std::span<const double> u) const;
  /// Leaf values whose region contains u along `dim` averaged with the volume
  /// of the rest of the region.
  double marginal(size_t dim, double u) const;
  double mean() const { return mean_; }
  double total_variance() const { return variance_; }

  /// Exact variance of the one- and two-dim marginals over the cells cut by
  /// the tree's thresholds.
  double main_effect(size_t dim) const;
  double pair_effect(size_t a, size_t b) const;  // without the two main effects

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const std::vector<LeafBox>& leaves() const { return leaves_; }

 private:
  struct Cell {
    double width = 0.0;
    double probe = 0.0;  // a unit coordinate inside the cell
  };
  std::vector<Cell> cells(size_t dim) const;
  bool covers(const LeafBox& b, size_t dim, double u) const;
  double fraction(const LeafBox& b, size_t dim) const;

  std::vector<int> cards_;
  std::vector<TreeNode> nodes_;
  std::vector<LeafBox> leaves_;
  double mean_ = 0.0;
  double variance_ = 0.0;
};

struct ForestOptions {
  int n_trees = 16;
  double max_features = 0.7;  // fraction of dims tried at each split, rounded up
  int min_leaf = 1;
  uint64_t seed = 0;
  void validate() const;
};

class RegressionForest {
 public:
  RegressionForest(HyperparamSpace space, std::vector<RegressionTree> trees);

  const HyperparamSpace& space() const { return space_; }
  const std::vector<RegressionTree>& trees() const { return trees_; }
  double predict(const ConfigVector& c) const;
  /// (mean, variance) over trees of the tree marginals at a value given in
  /// the dim's own units (category index for categorical dims).
  std::pair<double, double> marginal(size_t dim, double value) const;

 private:
  HyperparamSpace space_;
  std::vector<RegressionTree> trees_;
};

constexpr int kMinForestTrials = 8;

/// Inputs in unit-cube coordinates.
RegressionForest fit_forest(const HyperparamSpace& space, const std::vector<std::vector<double>>& x,
                            const std::vector<double>& y, const ForestOptions& opt);
/// Finished trials at `budget` only.
RegressionForest fit_forest(std::span<const TrialRecord> trials, double budget, const HyperparamSpace& space,
                            const ForestOptions& opt);

struct MarginalPoint {
  double value = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

struct DimImportance {
  std::string name;
  double fraction = 0.0;  // mean over trees
  double std = 0.0;
  std::vector<MarginalPoint> curve;
};

struct PairImportance {
  size_t a = 0;
  size_t b = 0;
  double fraction = 0.0;
};

struct ImportanceReport {
  double budget = 0.0;
  size_t n_trials = 0;
  int n_trees = 0;
  double total_variance = 0.0;  // mean over trees
  bool zero_variance = false;
  std::vector<DimImportance> dims;
  std::vector<PairImportance> pairs;
  double higher_order = 0.0;

  nlohmann::json to_json() const;
  /// dim,value,mean,std
  void write_curves_csv(std::ostream& os) const;
};

ImportanceReport importance(const RegressionForest& forest, int grid = 32);

/// One report per budget with at least kMinForestTrials finished trials.
std::vector<ImportanceReport> analyze_trials(const TrialLog& log, const ForestOptions& opt, int grid = 32);

}  // namespace cellsearch
