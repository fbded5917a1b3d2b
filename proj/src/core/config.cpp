#include "config.hpp"

#include <fstream>
#include <set>

namespace cellsearch {

using nlohmann::json;

namespace {

// Reads known keys out of one object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown config key '" + name_ + "." + key + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

int encoder_cells(const NetSkeleton& s) { return static_cast<int>(s.encoder.size()); }

}  // namespace

RunConfig RunConfig::toy() {
  RunConfig c;
  c.profile = "toy";
  c.search_net = SearchNetConfig::toy();
  c.derived_skeleton = SearchNetConfig::toy().skeleton;
  c.train.c_inits = {c.derived_skeleton.c_init};
  return c;
}

RunConfig RunConfig::paper_shaped() {
  RunConfig c;
  c.profile = "paper_shaped";
  c.data.height = 384;
  c.data.width = 768;
  c.data.max_disp = 160.0;
  c.data.channels = 3;
  c.search_net = SearchNetConfig::paper_shaped();
  c.derived_skeleton = DerivedNetConfig::paper_shaped(Genotype{}).skeleton;
  c.train.stack = "css";
  c.train.c_inits = {42, 18, 18};
  c.train.schedule.iters = 600000;
  c.bohb.b_max = 150000.0;
  c.bohb.b_min = 150000.0 / 9.0;
  c.bohb.eta = 3.0;
  c.bohb.n_iterations = 9;
  c.bohb.workers = 5;
  return c;
}

RunConfig RunConfig::for_profile(const std::string& name) {
  if (name == "toy") return toy();
  if (name == "paper_shaped") return paper_shaped();
  throw ConfigError("unknown profile '" + name + "' (expected toy or paper_shaped)");
}

void RunConfig::validate() const {
  if (!(data.max_disp > 1.0) || data.max_disp >= data.width / 4.0) {
    throw ConfigError("data.max_disp must lie in (1, width/4)");
  }
  if (data.n < 3) throw ConfigError("data.n must be at least 3 to fill every split");
  search.validate();
  NetSkeleton s = search_net.skeleton;
  s.height = data.height;
  s.width = data.width;
  s.image_channels = data.channels;
  s.validate();
  if (train.stack.empty() || train.stack.size() != train.c_inits.size()) {
    throw ConfigError("train.c_inits needs one entry per stack role");
  }
  NetSkeleton d = derived_skeleton;
  d.height = data.height;
  d.width = data.width;
  d.image_channels = data.channels;
  d.c_init = train.c_inits.front();
  d.validate();
  train.schedule.validate();
  bohb.validate();
  if (!(restart.lr >= 0.0) || !(restart.weight_decay >= 0.0) || restart.batch_size < 1) {
    throw ConfigError("restart settings out of range");
  }
  forest.validate();
  if (fanova_grid < 2) throw ConfigError("fanova.grid must be at least 2");
}

json RunConfig::to_json() const {
  json j;
  j["profile"] = profile;
  j["seed"] = seed;
  j["data"] = {{"n", data.n},
               {"height", data.height},
               {"width", data.width},
               {"max_disp", data.max_disp},
               {"channels", data.channels},
               {"seed", data.seed}};
  const NetSkeleton& sn = search_net.skeleton;
  j["search"] = {{"c_init", sn.c_init},
                 {"encoder_cells", encoder_cells(sn)},
                 {"decoder_cells", sn.decoder_cells},
                 {"corr_max_disp", sn.corr_max_disp},
                 {"num_intermediate", sn.num_intermediate},
                 {"warm_start_iters", search.warm_start_iters},
                 {"alternating_iters", search.alternating_iters},
                 {"tau_start", search.tau_start},
                 {"tau_end", search.tau_end},
                 {"batch_size", search.batch_size},
                 {"eval_every", search.eval_every},
                 {"scale_weights", search.scale_weights},
                 {"lr_base", search.sgd.lr_base},
                 {"lr_min", search.sgd.lr_min},
                 {"momentum", search.sgd.momentum},
                 {"weight_decay", search.sgd.weight_decay},
                 {"grad_clip", search.sgd.grad_clip},
                 {"alpha_lr", search.adam.lr},
                 {"alpha_weight_decay", search.adam.weight_decay}};
  const NetSkeleton& dn = derived_skeleton;
  const DerivedSchedule& ds = train.schedule;
  j["train"] = {{"stack", train.stack},
                {"c_inits", train.c_inits},
                {"freeze_previous", train.freeze_previous},
                {"encoder_cells", encoder_cells(dn)},
                {"decoder_cells", dn.decoder_cells},
                {"corr_max_disp", dn.corr_max_disp},
                {"num_intermediate", dn.num_intermediate},
                {"iters", ds.iters},
                {"batch_size", ds.batch_size},
                {"lr", ds.adam.lr},
                {"weight_decay", ds.adam.weight_decay},
                {"milestones", ds.milestones},
                {"drop", ds.drop},
                {"scale_weights", ds.scale_weights}};
  const KdeOptions& k = bohb.kde;
  j["bohb"] = {{"b_min", bohb.b_min},
               {"b_max", bohb.b_max},
               {"eta", bohb.eta},
               {"n_iterations", bohb.n_iterations},
               {"workers", bohb.workers},
               {"synchronous", bohb.synchronous},
               {"max_total_budget", bohb.max_total_budget},
               {"gamma", k.gamma},
               {"random_fraction", k.random_fraction},
               {"num_samples", k.num_samples},
               {"bandwidth_factor", k.bandwidth_factor},
               {"min_bandwidth", k.min_bandwidth}};
  j["restart"] = {{"lr", restart.lr}, {"weight_decay", restart.weight_decay}, {"batch_size", restart.batch_size}};
  j["fanova"] = {{"n_trees", forest.n_trees},
                 {"max_features", forest.max_features},
                 {"min_leaf", forest.min_leaf},
                 {"grid", fanova_grid}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  Section root(j, "config");
  std::string profile = "toy";
  root.read("profile", profile);
  RunConfig c = for_profile(profile);
  root.read("seed", c.seed);
  c.bohb.seed = c.seed;
  c.forest.seed = c.seed;

  if (const json* d = root.child("data")) {
    Section s(*d, "data");
    s.read("n", c.data.n);
    s.read("height", c.data.height);
    s.read("width", c.data.width);
    s.read("max_disp", c.data.max_disp);
    s.read("channels", c.data.channels);
    s.read("seed", c.data.seed);
    s.finish();
  }
  if (const json* d = root.child("search")) {
    Section s(*d, "search");
    NetSkeleton& sk = c.search_net.skeleton;
    int cells = encoder_cells(sk);
    s.read("c_init", sk.c_init);
    s.read("encoder_cells", cells);
    sk.encoder = alternating_encoder(cells);
    s.read("decoder_cells", sk.decoder_cells);
    s.read("corr_max_disp", sk.corr_max_disp);
    s.read("num_intermediate", sk.num_intermediate);
    s.read("warm_start_iters", c.search.warm_start_iters);
    s.read("alternating_iters", c.search.alternating_iters);
    s.read("tau_start", c.search.tau_start);
    s.read("tau_end", c.search.tau_end);
    s.read("batch_size", c.search.batch_size);
    s.read("eval_every", c.search.eval_every);
    s.read("scale_weights", c.search.scale_weights);
    s.read("lr_base", c.search.sgd.lr_base);
    s.read("lr_min", c.search.sgd.lr_min);
    s.read("momentum", c.search.sgd.momentum);
    s.read("weight_decay", c.search.sgd.weight_decay);
    s.read("grad_clip", c.search.sgd.grad_clip);
    s.read("alpha_lr", c.search.adam.lr);
    s.read("alpha_weight_decay", c.search.adam.weight_decay);
    s.finish();
  }
  if (const json* d = root.child("train")) {
    Section s(*d, "train");
    NetSkeleton& sk = c.derived_skeleton;
    int cells = encoder_cells(sk);
    s.read("stack", c.train.stack);
    s.read("c_inits", c.train.c_inits);
    s.read("freeze_previous", c.train.freeze_previous);
    s.read("encoder_cells", cells);
    sk.encoder = alternating_encoder(cells);
    s.read("decoder_cells", sk.decoder_cells);
    s.read("corr_max_disp", sk.corr_max_disp);
    s.read("num_intermediate", sk.num_intermediate);
    s.read("iters", c.train.schedule.iters);
    s.read("batch_size", c.train.schedule.batch_size);
    s.read("lr", c.train.schedule.adam.lr);
    s.read("weight_decay", c.train.schedule.adam.weight_decay);
    s.read("milestones", c.train.schedule.milestones);
    s.read("drop", c.train.schedule.drop);
    s.read("scale_weights", c.train.schedule.scale_weights);
    s.finish();
  }
  if (const json* d = root.child("bohb")) {
    Section s(*d, "bohb");
    s.read("b_min", c.bohb.b_min);
    s.read("b_max", c.bohb.b_max);
    s.read("eta", c.bohb.eta);
    s.read("n_iterations", c.bohb.n_iterations);
    s.read("workers", c.bohb.workers);
    s.read("synchronous", c.bohb.synchronous);
    s.read("max_total_budget", c.bohb.max_total_budget);
    s.read("gamma", c.bohb.kde.gamma);
    s.read("random_fraction", c.bohb.kde.random_fraction);
    s.read("num_samples", c.bohb.kde.num_samples);
    s.read("bandwidth_factor", c.bohb.kde.bandwidth_factor);
    s.read("min_bandwidth", c.bohb.kde.min_bandwidth);
    s.finish();
  }
  if (const json* d = root.child("restart")) {
    Section s(*d, "restart");
    s.read("lr", c.restart.lr);
    s.read("weight_decay", c.restart.weight_decay);
    s.read("batch_size", c.restart.batch_size);
    s.finish();
  }
  if (const json* d = root.child("fanova")) {
    Section s(*d, "fanova");
    s.read("n_trees", c.forest.n_trees);
    s.read("max_features", c.forest.max_features);
    s.read("min_leaf", c.forest.min_leaf);
    s.read("grid", c.fanova_grid);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace cellsearch
