#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "json.hpp"

namespace cellsearch {

enum class DimKind { kUniform, kLogUniform, kInteger, kCategorical };

std::string_view dim_kind_name(DimKind k);
DimKind dim_kind_from_name(std::string_view s);

struct Dim {
  std::string name;
  DimKind kind = DimKind::kUniform;
  double low = 0.0;
  double high = 1.0;
  std::vector<std::string> categories;
  bool categorical() const { return kind == DimKind::kCategorical; }
};

/// Values aligned with the space's dims. Categorical values hold the category
/// index, integer values hold an integral double.
using ConfigVector = std::vector<double>;

class HyperparamSpace {
 public:
  HyperparamSpace() = default;
  explicit HyperparamSpace(std::vector<Dim> dims);

  const std::vector<Dim>& dims() const { return dims_; }
  size_t size() const { return dims_.size(); }

  // Unit-cube coordinates; log dims map through log, integers and categories
  // to the centre of their cell.
  std::vector<double> to_unit(const ConfigVector& c) const;
  ConfigVector from_unit(std::span<const double> u) const;

  ConfigVector sample_uniform(Rng& rng) const;
  bool contains(const ConfigVector& c) const;

  nlohmann::json to_json() const;
  static HyperparamSpace from_json(const nlohmann::json& j);
  nlohmann::json config_to_json(const ConfigVector& c) const;  // {name: value}
  ConfigVector config_from_json(const nlohmann::json& j) const;

 private:
  std::vector<Dim> dims_;
};

HyperparamSpace load_space(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Hyperband

struct Bracket {
  int s = 0;
  int n = 0;                    // configurations in the first round
  double initial_budget = 0.0;  // b_max * eta^-s
};

/// Brackets s = s_max ... 0. A b_min within 0.1% (in log_eta units) of a rung
/// of the ladder counts as that rung, so rounded budgets such as 16.67k/150k
/// still give three rungs.
std::vector<Bracket> hyperband_brackets(double b_min, double b_max, double eta);
int hyperband_s_max(double b_min, double b_max, double eta);

/// Closed-form budget consumed by one full SuccessiveHalving run.
double bracket_cost(const Bracket& b, double eta);

struct Candidate {
  long config_id = 0;
  double loss = 0.0;  // failed trials carry +inf
};

/// The floor(|C| / eta) best candidates, ordered by (loss, config_id).
std::vector<Candidate> sh_round(std::vector<Candidate> candidates, double eta);

// ---------------------------------------------------------------------------
// Trials

enum class TrialStatus { kFinished, kFailed };

struct TrialRecord {
  long config_id = 0;
  ConfigVector config;
  double budget = 0.0;
  double loss = 0.0;
  double wall_time = 0.0;  // seconds since start; cumulative budget in sync mode
  TrialStatus status = TrialStatus::kFinished;
  int bracket = 0;  // index of the SuccessiveHalving run
  int round = 0;
  bool model_based = false;
  uint64_t seed = 0;
  std::string error;
};

nlohmann::json trial_to_json(const TrialRecord& t, const HyperparamSpace& space);
TrialRecord trial_from_json(const nlohmann::json& j, const HyperparamSpace& space);

// ---------------------------------------------------------------------------
// Model

struct KdeOptions {
  double gamma = 0.15;         // good fraction
  double random_fraction = 1.0 / 3.0;
  int num_samples = 64;        // acquisition candidates
  double bandwidth_factor = 3.0;
  double min_bandwidth = 1e-3;
  int min_points(size_t dims) const { return static_cast<int>(dims) + 2; }
  void validate() const;
};

/// Product kernel density in unit-cube coordinates: Gaussians truncated to
/// [0, 1] for ordered dims, Aitchison-Aitken kernels for categories.
class Kde {
 public:
  Kde() = default;
  Kde(const HyperparamSpace& space, std::vector<std::vector<double>> points, double min_bandwidth);

  double pdf(std::span<const double> u) const;
  /// Draws around a random stored point with every bandwidth multiplied by
  /// `widen`.
  std::vector<double> sample(Rng& rng, double widen) const;

  const std::vector<double>& bandwidths() const { return bw_; }
  size_t size() const { return points_.size(); }

 private:
  std::vector<std::vector<double>> points_;
  std::vector<double> bw_;
  std::vector<int> cards_;  // 0 for ordered dims
  double min_bw_ = 1e-3;
};

struct KdePair {
  double budget = 0.0;
  Kde good;
  Kde bad;
  double ratio(std::span<const double> u) const;
};

/// Uses finished and failed trials at `budget`; nullopt when there are fewer
/// than min_points of them.
std::optional<KdePair> fit_kdes(std::span<const TrialRecord> history, double budget, const HyperparamSpace& space,
                                const KdeOptions& opt);

struct SampledConfig {
  ConfigVector config;
  bool model_based = false;
};

SampledConfig sample_config(std::span<const TrialRecord> history, std::span<const double> budgets,
                            const HyperparamSpace& space, const KdeOptions& opt, Rng& rng);

// ---------------------------------------------------------------------------
// Worker protocol: 4-byte big-endian length followed by a JSON document.

std::string frame_message(const nlohmann::json& msg);
/// Reads one framed message; nullopt on clean end of stream.
std::optional<nlohmann::json> read_message(std::istream& in);

/// Throwing or returning a non-finite loss marks the trial failed.
using Objective = std::function<double(const ConfigVector& config, double budget, uint64_t seed)>;

/// Answers {"eval": ...} messages from `in` until the stream ends.
void serve_worker(std::istream& in, std::ostream& out, const HyperparamSpace& space, const Objective& f);

// ---------------------------------------------------------------------------
// Optimizer

struct BohbOptions {
  double b_min = 1.0;
  double b_max = 27.0;
  double eta = 3.0;
  int n_iterations = 4;  // SuccessiveHalving runs
  int workers = 1;
  bool synchronous = false;  // single worker evaluated inline, deterministic log
  double max_total_budget = 0.0;  // 0: no cap; otherwise never dispatch past it
  uint64_t seed = 0;
  KdeOptions kde;
  nlohmann::json metadata;  // copied into the trial log header when set
  void validate() const;
};

struct BohbResult {
  std::vector<TrialRecord> trials;  // completion order
  std::optional<TrialRecord> incumbent;  // best finished trial at b_max
  double total_budget = 0.0;
};

/// When `log` is set the trial log is written there as it grows.
BohbResult run_bohb(const Objective& f, const HyperparamSpace& space, const BohbOptions& opt,
                    std::ostream* log = nullptr);

struct TrialLog {
  nlohmann::json header;
  HyperparamSpace space;
  std::vector<TrialRecord> trials;
};

nlohmann::json trial_log_header(const HyperparamSpace& space, const BohbOptions& opt);
TrialLog read_trial_log(std::istream& in);
TrialLog read_trial_log(const std::filesystem::path& path);

struct Trajectory {
  double budget = 0.0;
  std::vector<std::pair<double, double>> points;  // (wall time, best loss so far)
};

/// Running minimum per budget over finished trials, in order of finish time
/// (ties by config id). Budgets ascending.
std::vector<Trajectory> incumbent_trajectory(std::span<const TrialRecord> trials);

/// Seeded 2-D quadratic bowl. Gaussian noise with sd noise * sqrt(1 - b / b_max),
/// so the full budget sees the exact bowl.
struct SyntheticQuadratic {
  double cx = 0.62;
  double cy = 0.27;
  double noise = 0.1;
  double b_max = 27.0;
  static HyperparamSpace space();
  double operator()(const ConfigVector& c, double budget, uint64_t seed) const;
};

}  // namespace cellsearch
