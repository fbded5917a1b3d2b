#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bilevel.hpp"
#include "bohb.hpp"
#include "fanova.hpp"

namespace cellsearch {

struct TrainSettings {
  std::string stack = "c";
  std::vector<int> c_inits{8};
  bool freeze_previous = true;
  DerivedSchedule schedule;
};

struct RestartSettings {
  double lr = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 4;
};

/// Every parameter of a run. Sections: data, search, train, bohb, restart,
/// fanova. Keys that are not recognised are rejected.
struct RunConfig {
  std::string profile = "toy";
  uint64_t seed = 0;
  GenerateOptions data;
  SearchNetConfig search_net;
  SearchSchedule search;
  NetSkeleton derived_skeleton;  // encoder/decoder shape of derived nets; c_init comes from train
  TrainSettings train;
  BohbOptions bohb;
  RestartSettings restart;
  ForestOptions forest;
  int fanova_grid = 32;

  static RunConfig toy();
  /// Structural constants of the full-size setting: 24-channel search net
  /// with 6 encoder cells, 7-cell derived nets at 42/18 channels, budgets
  /// b/9, b/3, b.
  static RunConfig paper_shaped();
  static RunConfig for_profile(const std::string& name);

  void validate() const;
  nlohmann::json to_json() const;
  /// Starts from the document's profile (toy when absent) and applies every
  /// key present.
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace cellsearch
