#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cellspace.hpp"

namespace cellsearch {

/// Named parameter list, in construction order.
class ParamList {
 public:
  void add(std::string name, const Tensor& t) { items_.emplace_back(std::move(name), t); }
  void append(const std::string& prefix, std::span<const Tensor> ts);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  size_t count() const;  // total scalar parameters
  void set_trainable(bool on) const;
  void zero() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

/// Skeleton shared by search and derived networks.
struct NetSkeleton {
  int c_init = 8;
  std::vector<CellKind> encoder;  // alternating, starts with a reduction cell
  int decoder_cells = 2;
  int corr_max_disp = 4;
  int height = 32;
  int width = 64;
  int image_channels = 1;
  int num_intermediate = 3;
  bool siamese = true;
  bool affine = false;

  int reductions() const;
  int bottleneck_divisor() const { return 4 << reductions(); }
  int output_divisor() const { return bottleneck_divisor() >> decoder_cells; }
  // Siamese nets take one image per branch; single-stream refinement nets
  // take left, right, warped right and the previous disparity.
  int input_channels() const { return siamese ? image_channels : 3 * image_channels + 1; }
  void validate() const;
};

std::vector<CellKind> alternating_encoder(int cells);

struct SearchNetConfig {
  NetSkeleton skeleton;

  static SearchNetConfig toy();
  // Encoder of 6 cells (downsampling 32), 3 upsampling cells, 24 initial channels.
  static SearchNetConfig paper_shaped();
};

struct DerivedNetConfig {
  Genotype genotype;
  NetSkeleton skeleton;

  static DerivedNetConfig toy(Genotype g, bool siamese = true, int c_init = 8);
  // 7 encoder cells (downsampling 64), 4 upsampling cells; c_init 42 ("C") or 18 ("c").
  static DerivedNetConfig paper_shaped(Genotype g, bool siamese = true, int c_init = 42);
};

/// Encoder-decoder disparity network: stem, (Siamese first reduction +
/// correlation), alternating normal/reduction cells, upsampling cells with
/// encoder skip connections. Predictions come out coarse to fine.
class DispNet {
 public:
  static DispNet search(const SearchNetConfig& cfg, uint64_t seed);
  static DispNet derived(const DerivedNetConfig& cfg, uint64_t seed);

  // Siamese nets: two images. Single-stream nets: `left` is the stacked input
  // and `right` must be undefined.
  std::vector<ScaledPrediction> forward(const Tensor& left, const Tensor& right, const AlphaSet* alphas = nullptr) const;
  // Correlation output for a stereo pair (Siamese nets only).
  Tensor correlation_features(const Tensor& left, const Tensor& right, const AlphaSet* alphas = nullptr) const;

  const NetSkeleton& skeleton() const { return skel_; }
  bool is_search() const { return search_; }
  const ParamList& parameters() const { return params_; }
  std::string genotype_hash() const { return genotype_hash_; }

 private:
  struct Conv {
    ConvSpec spec;
    Tensor weight;
    Tensor bias;
  };
  struct CellStage {
    Cell cell;
    Tensor compress;  // (channels, num_intermediate * channels, 1, 1)
    int divisor = 1;
    Conv pred;        // upsampling stages only
  };

  DispNet() = default;
  void build(const NetSkeleton& skel, const Genotype* genotype, uint64_t seed);
  Conv make_conv(int in, int out, int k, int stride, Rng& rng, const std::string& name, double stddev = -1.0);
  Tensor run_conv(const Conv& c, const Tensor& x) const;
  Tensor stem(const Tensor& x) const;
  Tensor run_stage(const CellStage& s, std::span<const Tensor> inputs, const AlphaSet* alphas, Tensor* cat) const;

  NetSkeleton skel_;
  bool search_ = false;
  std::string genotype_hash_;
  Conv stem1_, stem2_;
  std::vector<CellStage> encoder_;
  std::vector<CellStage> decoder_;
  Conv bottleneck_pred_;
  ParamList params_;
};

/// C followed by S refinement nets. Every refinement net predicts residuals
/// at the same scales as the first net; output_n = output_{n-1} + residual_n.
class DispStack {
 public:
  explicit DispStack(std::vector<DispNet> nets);

  // One prediction list per stage (stage 0 = first net).
  std::vector<std::vector<ScaledPrediction>> forward(const Tensor& left, const Tensor& right) const;
  std::vector<ScaledPrediction> final_predictions(const Tensor& left, const Tensor& right) const {
    return forward(left, right).back();
  }

  // Only the last net is trainable when freeze is on.
  void set_freeze_previous(bool freeze) const;
  size_t size() const { return nets_.size(); }
  const DispNet& net(size_t i) const { return nets_[i]; }
  const ParamList& parameters() const { return params_; }

 private:
  std::vector<DispNet> nets_;
  ParamList params_;  // "net<i>/" prefixed handles into nets_
};

struct StackConfig {
  std::string roles = "css";  // first must be 'c'
  bool freeze_previous = true;
};

DispStack build_stack(const StackConfig& cfg, const Genotype& genotype, std::span<const int> c_inits,
                      const NetSkeleton& base, uint64_t seed);

/// Upsamples a prediction to full resolution in pixels of the input images.
Tensor to_full_resolution(const ScaledPrediction& p);

// Manifest JSON ("manifest.json") plus one tensor blob per parameter.
void save_checkpoint(const ParamList& params, const nlohmann::json& config, const std::string& genotype_hash,
                     const std::filesystem::path& dir);
// Loads values into `params` by name; throws CorruptionError / IoError.
nlohmann::json load_checkpoint(const ParamList& params, const std::filesystem::path& dir);

nlohmann::json skeleton_to_json(const NetSkeleton& s);
NetSkeleton skeleton_from_json(const nlohmann::json& j);

}  // namespace cellsearch
