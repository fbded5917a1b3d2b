#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "netbuilder.hpp"
#include "stereodata.hpp"

namespace cellsearch {

// lr_min + (lr_base - lr_min)(1 + cos(pi t / T)) / 2
double cosine_lr(long t, long T, double lr_base, double lr_min);
// base * factor^(number of milestones <= t)
double step_lr(long t, std::span<const long> milestones, double factor, double base);

struct SgdConfig {
  double lr_base = 0.025;
  double lr_min = 0.001;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;  // global L2 norm over the stepped parameters; 0 disables
  void validate() const;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
  void validate() const;
};

struct SgdState {
  std::vector<std::vector<double>> momentum;
};

struct AdamState {
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// `grads[i]` empty means no gradient reached parameter i (treated as zero).
// Parameters with requires_grad off are left untouched. L2 decay is added to
// the gradient after clipping.
void sgd_step(std::span<const Tensor> params, std::span<const std::vector<double>> grads, const SgdConfig& cfg,
              double lr, SgdState& state);
void adam_step(std::span<const Tensor> params, std::span<const std::vector<double>> grads, const AdamConfig& cfg,
               double lr, AdamState& state);

std::vector<std::vector<double>> gather_grads(const Gradients& g, std::span<const Tensor> params);

/// Equal weights when `weights` is empty.
Tensor prediction_loss(std::span<const ScaledPrediction> preds, const Batch& b, std::span<const double> weights);

// ---------------------------------------------------------------------------
// Architecture search

enum class Phase { kWarmStart, kAlternating };
std::string_view phase_name(Phase p);

struct SearchSchedule {
  int warm_start_iters = 200;
  int alternating_iters = 1000;
  double tau_start = 1.0;
  double tau_end = 0.2;
  int batch_size = 4;
  int eval_every = 100;  // full validation-split EPE; 0 disables intermediate points
  std::vector<double> scale_weights;
  SgdConfig sgd;
  AdamConfig adam{3e-3, 0.9, 0.999, 1e-8, 1e-3};
  void validate() const;
};

struct UpdateRecord {
  long iteration = 0;
  bool alphas = false;  // false: network weights
  DataTag tag = DataTag::kTrain;
};

struct BilevelState {
  long iteration = 0;
  Phase phase = Phase::kWarmStart;
  SgdState sgd;
  AdamState adam;
  std::vector<UpdateRecord> updates;
};

struct StepLosses {
  double train = 0.0;
  std::optional<double> val;
};

/// One warm-start step (w only) or one alternating step: w on the training
/// batch, then alpha on the validation batch, first order. The batches' tags
/// are checked, and every update is logged with the tag of the data it saw.
StepLosses search_step(const DispNet& net, AlphaSet& alphas, const Batch& train, const Batch* val,
                       const SearchSchedule& cfg, BilevelState& state);
StepLosses alternate_step(const DispNet& net, AlphaSet& alphas, const Batch& train, const Batch& val,
                          const SearchSchedule& cfg, BilevelState& state);

struct HistoryRow {
  long iteration = 0;
  Phase phase = Phase::kWarmStart;
  double train_epe = 0.0;
  std::optional<double> val_epe;  // alpha-step batch loss
  double lr = 0.0;
  double tau = 1.0;
};

struct SearchResult {
  AlphaSet alphas;
  Genotype genotype;
  std::vector<HistoryRow> history;
  std::vector<std::pair<long, double>> val_curve;  // full validation-split EPE
  std::vector<UpdateRecord> updates;
  double initial_val_epe() const { return val_curve.front().second; }
  double final_val_epe() const { return val_curve.back().second; }
};

double search_lr(const SearchSchedule& cfg, long t);
double search_tau(const SearchSchedule& cfg, long t);

SearchResult train_search(const SearchNetConfig& net_cfg, const SearchSchedule& cfg, const StereoDataset& data,
                          uint64_t seed);

void write_history_csv(const std::vector<HistoryRow>& rows, std::ostream& os);

/// Full-resolution validation EPE of a search net under the given alphas.
double search_net_epe(const DispNet& net, const AlphaSet& alphas, const StereoDataset& data, Split split);

// ---------------------------------------------------------------------------
// Derived networks

struct DerivedSchedule {
  int iters = 600;
  int batch_size = 4;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 0.0};
  // Fractions of `iters`; the drops of a 600k schedule at 300k/400k/500k.
  std::vector<double> milestones{0.5, 2.0 / 3.0, 5.0 / 6.0};
  double drop = 0.5;
  std::vector<double> scale_weights;
  Split train_split = Split::kSearchTrain;
  Split eval_split = Split::kTest;
  void validate() const;
};

struct DerivedResult {
  double final_epe = 0.0;
  std::vector<double> losses;  // per iteration
};

Tensor stack_predict(const DispStack& stack, const Tensor& left, const Tensor& right);

DerivedResult train_derived(const DispStack& stack, const StereoDataset& data, const DerivedSchedule& cfg,
                            uint64_t seed);

/// Everything needed to rebuild a trained stack from a checkpoint.
struct StackSpec {
  Genotype genotype;
  StackConfig stack;
  std::vector<int> c_inits;
  NetSkeleton skeleton;
  uint64_t seed = 0;

  DispStack build() const;
  nlohmann::json to_json() const;
  static StackSpec from_json(const nlohmann::json& j);
};

void save_stack_checkpoint(const StackSpec& spec, const DispStack& stack, const std::filesystem::path& dir);
/// Rebuilds the stack described by the manifest and loads its weights.
std::pair<StackSpec, DispStack> load_stack_checkpoint(const std::filesystem::path& dir);

struct RestartConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  long budget_iters = 0;
  int batch_size = 4;
  Split train_split = Split::kSearchTrain;
  Split eval_split = Split::kSearchVal;
  uint64_t seed = 0;
};

/// Resumes from the snapshot, trains `budget_iters` with the learning rate
/// cosine-annealed to zero over exactly that many steps, returns EPE.
double snapshot_restart(const std::filesystem::path& checkpoint, const StereoDataset& data, const RestartConfig& cfg);

}  // namespace cellsearch
