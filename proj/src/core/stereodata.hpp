#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "tensor.hpp"

namespace cellsearch {

/// One rectified pair with exact ground truth. All tensors are (1, C, H, W);
/// disparity and mask are single-channel.
struct StereoSample {
  std::string id;
  Tensor left;
  Tensor right;
  Tensor disparity;
  Tensor mask;  // 1 where the left pixel is visible in the right view
};

enum class Split { kSearchTrain, kSearchVal, kTest };

std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

struct DatasetManifest {
  static constexpr int kVersion = 1;
  int count = 0;
  int height = 32;
  int width = 64;
  int channels = 1;
  double max_disp = 8.0;
  uint64_t seed = 0;
  // [0, train_end) search-train, [train_end, val_end) search-val, rest test.
  int train_end = 0;
  int val_end = 0;
};

struct StereoDataset {
  DatasetManifest manifest;
  std::vector<StereoSample> samples;

  std::vector<size_t> indices(Split s) const;
};

struct GenerateOptions {
  int n = 200;
  int height = 32;
  int width = 64;
  double max_disp = 8.0;
  int channels = 1;
  uint64_t seed = 0;
};

/// Layered fronto-parallel scenes: a textured background plus 1-4 textured
/// rectangles at larger disparities. The right view is rendered by exact
/// inverse mapping of each layer's texture; 40/40/20 split.
StereoDataset generate_dataset(const GenerateOptions& opt);

nlohmann::json manifest_to_json(const DatasetManifest& m);

void save_dataset(const StereoDataset& ds, const std::filesystem::path& dir);
StereoDataset load_dataset(const std::filesystem::path& dir);

enum class DataTag { kTrain, kVal, kTest };

std::string_view data_tag_name(DataTag t);

struct Batch {
  Tensor left;
  Tensor right;
  Tensor disparity;
  Tensor mask;
  DataTag tag = DataTag::kTrain;
  int size() const { return left.shape().n; }
};

Batch make_batch(const StereoDataset& ds, std::span<const size_t> indices, DataTag tag);

/// Same window cut from every view; disparities are unchanged by a crop.
Batch random_crop(const Batch& b, int height, int width, Rng& rng);

/// Cycles through a split in seeded random order, one batch at a time.
class BatchStream {
 public:
  BatchStream(const StereoDataset& ds, Split split, DataTag tag, int batch_size, uint64_t seed);
  Batch next();

 private:
  const StereoDataset* ds_;
  std::vector<size_t> pool_;
  DataTag tag_;
  int batch_size_;
  Rng rng_;
  size_t cursor_ = 0;
};

/// Maps a (left, right) batch to full-resolution disparity (N, 1, H, W).
using Predictor = std::function<Tensor(const Tensor& left, const Tensor& right)>;

struct EvalReport {
  double epe = 0.0;   // pooled over all valid pixels of the split
  size_t pixels = 0;
  std::vector<std::pair<std::string, double>> per_sample;
};

EvalReport evaluate(const Predictor& predict, const StereoDataset& ds, Split split, int batch_size = 8);
void write_eval_csv(const EvalReport& r, std::ostream& os);

}  // namespace cellsearch
