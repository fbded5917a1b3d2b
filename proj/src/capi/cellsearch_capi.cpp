#include "cellsearch.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <sstream>
#include <string>

#include "bilevel.hpp"
#include "bohb.hpp"
#include "config.hpp"
#include "fanova.hpp"
#include "report.hpp"
#include "stereodata.hpp"

using nlohmann::json;
namespace cs = cellsearch;

struct cs_config {
  cs::RunConfig cfg;
};

struct cs_dataset {
  cs::StereoDataset ds;
};

struct cs_search {
  cs::SearchResult result;
};

namespace {

thread_local std::string g_last_error;

cs_status status_of(cs::ErrorKind k) {
  switch (k) {
    case cs::ErrorKind::kConfig: return CS_ERR_CONFIG;
    case cs::ErrorKind::kShape: return CS_ERR_SHAPE;
    case cs::ErrorKind::kUsage: return CS_ERR_USAGE;
    case cs::ErrorKind::kParse: return CS_ERR_PARSE;
    case cs::ErrorKind::kIo: return CS_ERR_IO;
    case cs::ErrorKind::kCorrupt: return CS_ERR_CORRUPT;
    case cs::ErrorKind::kMigration: return CS_ERR_MIGRATION;
    case cs::ErrorKind::kEvaluation: return CS_ERR_EVALUATION;
    case cs::ErrorKind::kRuntime: return CS_ERR_RUNTIME;
  }
  return CS_ERR_RUNTIME;
}

template <class F>
cs_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return CS_OK;
  } catch (const cs::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return CS_ERR_PARSE;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return CS_ERR_RUNTIME;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CS_ERR_RUNTIME;
  } catch (...) {
    g_last_error = "unknown error";
    return CS_ERR_RUNTIME;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw cs::UsageError(std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

json parse_json(const char* text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw cs::ParseError(std::string(what) + ": " + e.what());
  }
}

cs::NetSkeleton sized(cs::NetSkeleton s, const cs::StereoDataset& ds) {
  s.height = ds.manifest.height;
  s.width = ds.manifest.width;
  s.image_channels = ds.manifest.channels;
  return s;
}

cs::HyperparamSpace restart_space() {
  return cs::HyperparamSpace({{"lr", cs::DimKind::kLogUniform, 1e-5, 1e-2, {}},
                              {"weight_decay", cs::DimKind::kLogUniform, 1e-7, 1e-2, {}},
                              {"batch_size", cs::DimKind::kInteger, 2, 8, {}}});
}

cs::Objective restart_objective(const cs::HyperparamSpace& space, const cs::RunConfig& cfg,
                                const cs::StereoDataset& ds, const std::filesystem::path& checkpoint) {
  for (const cs::Dim& d : space.dims()) {
    if (d.name != "lr" && d.name != "weight_decay" && d.name != "batch_size") {
      throw cs::ConfigError("restart objective has no hyperparameter '" + d.name + "'");
    }
  }
  return [space, cfg, &ds, checkpoint](const cs::ConfigVector& c, double budget, uint64_t seed) {
    cs::RestartConfig rc;
    rc.lr = cfg.restart.lr;
    rc.weight_decay = cfg.restart.weight_decay;
    rc.batch_size = cfg.restart.batch_size;
    for (size_t k = 0; k < space.size(); ++k) {
      const std::string& name = space.dims()[k].name;
      if (name == "lr") rc.lr = c[k];
      if (name == "weight_decay") rc.weight_decay = c[k];
      if (name == "batch_size") rc.batch_size = static_cast<int>(c[k]);
    }
    rc.budget_iters = std::lround(budget);
    rc.seed = seed;
    return cs::snapshot_restart(checkpoint, ds, rc);
  };
}

}  // namespace

extern "C" {

const char* cs_version(void) { return "0.3.0"; }

const char* cs_status_name(cs_status status) {
  switch (status) {
    case CS_OK: return "ok";
    case CS_ERR_CONFIG: return "config error";
    case CS_ERR_SHAPE: return "shape error";
    case CS_ERR_USAGE: return "usage error";
    case CS_ERR_PARSE: return "parse error";
    case CS_ERR_IO: return "io error";
    case CS_ERR_CORRUPT: return "corruption error";
    case CS_ERR_MIGRATION: return "migration error";
    case CS_ERR_EVALUATION: return "evaluation error";
    case CS_ERR_RUNTIME: return "runtime error";
    case CS_ERR_NULL_ARGUMENT: return "null argument";
  }
  return "unknown status";
}

const char* cs_last_error(void) { return g_last_error.c_str(); }

void cs_string_free(char* s) { std::free(s); }

// ---------------------------------------------------------------------------
// Config

cs_status cs_config_default(const char* profile, cs_config** out) {
  if (!out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *out = new cs_config{cs::RunConfig::for_profile(profile ? profile : "toy")}; });
}

cs_status cs_config_load(const char* path, cs_config** out) {
  if (!path || !out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *out = new cs_config{cs::load_run_config(path)}; });
}

cs_status cs_config_parse(const char* json_text, cs_config** out) {
  if (!json_text || !out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    json j;
    try {
      j = json::parse(json_text);
    } catch (const json::exception& e) {
      throw cs::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    *out = new cs_config{cs::RunConfig::from_json(j)};
  });
}

cs_status cs_config_patch(cs_config* cfg, const char* json_patch) {
  if (!cfg || !json_patch) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    json j = cfg->cfg.to_json();
    json patch;
    try {
      patch = json::parse(json_patch);
    } catch (const json::exception& e) {
      throw cs::ConfigError(std::string("config patch is not valid JSON: ") + e.what());
    }
    if (!patch.is_object()) throw cs::ConfigError("config patch must be an object");
    // Switching profile restarts from that profile's defaults.
    if (patch.contains("profile")) j = cs::RunConfig::for_profile(patch.at("profile").get<std::string>()).to_json();
    j.merge_patch(patch);
    cfg->cfg = cs::RunConfig::from_json(j);
  });
}

cs_status cs_config_to_json(const cs_config* cfg, char** out) {
  if (!cfg || !out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *out = dup_string(cfg->cfg.to_json().dump(2)); });
}

void cs_config_free(cs_config* cfg) { delete cfg; }

// ---------------------------------------------------------------------------
// Data

cs_status cs_dataset_generate(const cs_config* cfg, cs_dataset** out) {
  if (!cfg || !out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *out = new cs_dataset{cs::generate_dataset(cfg->cfg.data)}; });
}

cs_status cs_dataset_load(const char* dir, cs_dataset** out) {
  if (!dir || !out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *out = new cs_dataset{cs::load_dataset(dir)}; });
}

cs_status cs_dataset_save(const cs_dataset* ds, const char* dir) {
  if (!ds || !dir) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { cs::save_dataset(ds->ds, dir); });
}

cs_status cs_dataset_manifest(const cs_dataset* ds, char** json_out) {
  if (!ds || !json_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *json_out = dup_string(cs::manifest_to_json(ds->ds.manifest).dump(2)); });
}

void cs_dataset_free(cs_dataset* ds) { delete ds; }

// ---------------------------------------------------------------------------
// Search

cs_status cs_search_run(const cs_config* cfg, const cs_dataset* ds, cs_search** out) {
  if (!cfg || !ds || !out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::RunConfig& c = cfg->cfg;
    auto* s = new cs_search{cs::train_search(c.search_net, c.search, ds->ds, c.seed)};
    s->result.genotype.meta["config"] = c.to_json();
    *out = s;
  });
}

cs_status cs_search_genotype(const cs_search* s, char** json_out) {
  if (!s || !json_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *json_out = dup_string(cs::genotype_to_json(s->result.genotype)); });
}

cs_status cs_search_alphas(const cs_search* s, char** json_out) {
  if (!s || !json_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { *json_out = dup_string(s->result.alphas.to_json().dump(2)); });
}

cs_status cs_search_history_csv(const cs_search* s, char** csv_out) {
  if (!s || !csv_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    std::ostringstream os;
    cs::write_history_csv(s->result.history, os);
    *csv_out = dup_string(os.str());
  });
}

cs_status cs_search_summary(const cs_search* s, char** json_out) {
  if (!s || !json_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::SearchResult& r = s->result;
    long alpha = 0;
    long alpha_val = 0;
    for (const cs::UpdateRecord& u : r.updates) {
      if (!u.alphas) continue;
      ++alpha;
      alpha_val += u.tag == cs::DataTag::kVal;
    }
    json curve = json::array();
    for (const auto& [it, epe] : r.val_curve) curve.push_back({it, epe});
    const json j = {{"initial_val_epe", r.initial_val_epe()},
                    {"final_val_epe", r.final_val_epe()},
                    {"val_curve", curve},
                    {"alpha_updates", alpha},
                    {"alpha_updates_on_val", alpha_val},
                    {"genotype_hash", r.genotype.hash()}};
    *json_out = dup_string(j.dump(2));
  });
}

void cs_search_free(cs_search* s) { delete s; }

cs_status cs_random_genotype(int num_intermediate, uint64_t seed, char** json_out) {
  if (!json_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    cs::Genotype g = cs::sample_random_genotype(num_intermediate, seed);
    g.meta = {{"source", "random"}, {"seed", seed}};
    *json_out = dup_string(cs::genotype_to_json(g));
  });
}

cs_status cs_genotype_validate(const char* json_text) {
  if (!json_text) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] { cs::genotype_from_json(json_text).validate(); });
}

// ---------------------------------------------------------------------------
// Derived nets

cs_status cs_train_run(const cs_config* cfg, const cs_dataset* ds, const char* genotype_json, int zero_refinement,
                       const char* checkpoint_dir, char** result_json) {
  if (!cfg || !ds || !genotype_json || !result_json) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::RunConfig& c = cfg->cfg;
    cs::StackSpec spec;
    spec.genotype = cs::genotype_from_json(genotype_json);
    spec.genotype.validate();
    spec.stack.roles = c.train.stack;
    spec.stack.freeze_previous = c.train.freeze_previous;
    spec.c_inits = c.train.c_inits;
    spec.skeleton = sized(c.derived_skeleton, ds->ds);
    spec.seed = c.seed;
    const cs::DispStack stack = spec.build();

    const std::vector<size_t> test = ds->ds.indices(cs::Split::kTest);
    if (test.empty()) throw cs::EvaluationError("test split is empty");
    const size_t probe_index[1] = {test.front()};
    const cs::Batch probe = cs::make_batch(ds->ds, probe_index, cs::DataTag::kTest);

    json res;
    if (zero_refinement) {
      for (size_t i = 1; i < stack.size(); ++i) stack.net(i).parameters().zero();
      const auto stages = stack.forward(probe.left, probe.right);
      const auto first = stack.net(0).forward(probe.left, probe.right);
      bool equal = true;
      double max_diff = 0.0;
      for (size_t s = 0; s < first.size(); ++s) {
        const cs::Tensor& a = stages.back()[s].pred;
        const cs::Tensor& b = first[s].pred;
        equal = equal && a.shape() == b.shape();
        for (size_t i = 0; equal && i < a.numel(); ++i) {
          equal = a[i] == b[i];
          max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
        }
      }
      res["refinement_identity"] = {{"exact", equal}, {"max_abs_diff", max_diff}};
    }

    json shapes = json::array();
    for (const cs::ScaledPrediction& p : stack.final_predictions(probe.left, probe.right)) {
      const cs::Shape sh = p.pred.shape();
      shapes.push_back({{"shape", {sh.n, sh.c, sh.h, sh.w}}, {"factor", p.factor}});
    }
    json params = json::array();
    for (size_t i = 0; i < stack.size(); ++i) params.push_back(stack.net(i).parameters().count());

    const cs::DerivedResult r = cs::train_derived(stack, ds->ds, c.train.schedule, c.seed);
    if (checkpoint_dir) cs::save_stack_checkpoint(spec, stack, checkpoint_dir);

    res["stack"] = c.train.stack;
    res["c_inits"] = c.train.c_inits;
    res["params"] = params;
    res["total_params"] = stack.parameters().count();
    res["output_scales"] = shapes;
    res["final_epe"] = r.final_epe;
    res["losses"] = r.losses;
    res["genotype_hash"] = spec.genotype.hash();
    res["config"] = c.to_json();
    *result_json = dup_string(res.dump(2));
  });
}

// ---------------------------------------------------------------------------
// BOHB

cs_status cs_bohb_closed_form_budget(double b_min, double b_max, double eta, int n_iterations, double* out) {
  if (!out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    if (n_iterations < 0) throw cs::ConfigError("n_iterations must be non-negative");
    const auto brackets = cs::hyperband_brackets(b_min, b_max, eta);
    double total = 0.0;
    for (int i = 0; i < n_iterations; ++i) total += cs::bracket_cost(brackets[i % brackets.size()], eta);
    *out = total;
  });
}

cs_status cs_bohb_run(const cs_config* cfg, const char* objective, const char* space_json, const cs_dataset* ds,
                      const char* checkpoint_dir, const char* log_path, char** summary_json) {
  if (!cfg || !objective || !summary_json) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::RunConfig& c = cfg->cfg;
    cs::BohbOptions opt = c.bohb;
    opt.metadata = {{"objective", objective}, {"config", c.to_json()}};
    const std::string obj = objective;
    cs::HyperparamSpace space;
    cs::Objective f;
    if (obj == "synthetic") {
      cs::SyntheticQuadratic q;
      q.b_max = opt.b_max;
      space = space_json ? cs::HyperparamSpace::from_json(parse_json(space_json, "space")) : q.space();
      if (space.size() != 2) throw cs::ConfigError("synthetic objective needs a 2-D space");
      f = q;
    } else if (obj == "restart") {
      require(ds, "dataset");
      require(checkpoint_dir, "checkpoint directory");
      space = space_json ? cs::HyperparamSpace::from_json(parse_json(space_json, "space")) : restart_space();
      f = restart_objective(space, c, ds->ds, checkpoint_dir);
    } else {
      throw cs::ConfigError("unknown objective '" + obj + "' (expected synthetic or restart)");
    }

    cs::BohbResult r;
    if (log_path) {
      std::ofstream log(log_path);
      if (!log) throw cs::IoError(std::string("cannot write trial log ") + log_path);
      r = cs::run_bohb(f, space, opt, &log);
    } else {
      r = cs::run_bohb(f, space, opt);
    }

    double closed = 0.0;
    const auto brackets = cs::hyperband_brackets(opt.b_min, opt.b_max, opt.eta);
    json bj = json::array();
    for (int i = 0; i < opt.n_iterations; ++i) closed += cs::bracket_cost(brackets[i % brackets.size()], opt.eta);
    for (const cs::Bracket& b : brackets) {
      bj.push_back({{"s", b.s}, {"n", b.n}, {"initial_budget", b.initial_budget}, {"cost", cs::bracket_cost(b, opt.eta)}});
    }
    long failed = 0;
    for (const cs::TrialRecord& t : r.trials) failed += t.status == cs::TrialStatus::kFailed;
    json j = {{"objective", obj},
              {"n_trials", r.trials.size()},
              {"n_failed", failed},
              {"total_budget", r.total_budget},
              {"closed_form_budget", closed},
              {"capped", opt.max_total_budget > 0.0},
              {"brackets", bj},
              {"config", c.to_json()}};
    if (r.incumbent) j["incumbent"] = cs::trial_to_json(*r.incumbent, space);
    *summary_json = dup_string(j.dump(2));
  });
}

// ---------------------------------------------------------------------------
// Analysis and reports

cs_status cs_fanova_run(const cs_config* cfg, const char* trials_path, double budget, char** report_json,
                        char** curves_csv) {
  if (!cfg || !trials_path || !report_json || !curves_csv) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::TrialLog log = cs::read_trial_log(std::filesystem::path(trials_path));
    std::vector<cs::ImportanceReport> reports;
    if (budget > 0.0) {
      size_t n = 0;
      for (const cs::TrialRecord& t : log.trials) n += t.budget == budget && t.status == cs::TrialStatus::kFinished;
      cs::ImportanceReport r = cs::importance(cs::fit_forest(log.trials, budget, log.space, cfg->cfg.forest),
                                              cfg->cfg.fanova_grid);
      r.budget = budget;
      r.n_trials = n;
      reports.push_back(std::move(r));
    } else {
      reports = cs::analyze_trials(log, cfg->cfg.forest, cfg->cfg.fanova_grid);
      if (reports.empty()) {
        throw cs::EvaluationError("no budget in " + std::string(trials_path) + " has " +
                                  std::to_string(cs::kMinForestTrials) + " finished trials");
      }
    }
    json j = {{"trials", trials_path}, {"config", cfg->cfg.to_json()}, {"reports", json::array()}};
    std::ostringstream csv;
    csv << "budget,dim,value,mean,std\n";
    char buf[160];
    for (const cs::ImportanceReport& r : reports) {
      j["reports"].push_back(r.to_json());
      for (const cs::DimImportance& d : r.dims) {
        for (const cs::MarginalPoint& p : d.curve) {
          std::snprintf(buf, sizeof buf, "%.17g,%s,%.17g,%.17g,%.17g\n", r.budget, d.name.c_str(), p.value, p.mean,
                        p.std);
          csv << buf;
        }
      }
    }
    *report_json = dup_string(j.dump(2));
    *curves_csv = dup_string(csv.str());
  });
}

cs_status cs_incumbent_csv(const char* trials_path, char** csv_out) {
  if (!trials_path || !csv_out) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::TrialLog log = cs::read_trial_log(std::filesystem::path(trials_path));
    std::ostringstream os;
    cs::write_incumbent_csv(cs::incumbent_trajectory(log.trials), os);
    *csv_out = dup_string(os.str());
  });
}

cs_status cs_report_render(const char* trials_path, const char* history_csv_path, const char* out_dir,
                           char** summary_json) {
  if (!trials_path || !out_dir || !summary_json) return CS_ERR_NULL_ARGUMENT;
  return guarded([&] {
    const cs::TrialLog log = cs::read_trial_log(std::filesystem::path(trials_path));
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    auto open = [&](const std::string& name) {
      std::ofstream os(dir / name);
      if (!os) throw cs::IoError("cannot write " + (dir / name).string());
      return os;
    };
    json files = json::array();
    {
      std::ofstream os = open("trials.svg");
      cs::render_svg(cs::trial_scatter_plot(log.trials), os, log.header.dump());
      files.push_back("trials.svg");
    }
    {
      std::ofstream os = open("trials.csv");
      cs::write_trials_csv(log.trials, log.space, os);
      files.push_back("trials.csv");
    }
    {
      std::ofstream os = open("incumbent.csv");
      cs::write_incumbent_csv(cs::incumbent_trajectory(log.trials), os);
      files.push_back("incumbent.csv");
    }
    if (history_csv_path) {
      std::ifstream in(history_csv_path);
      if (!in) throw cs::IoError(std::string("cannot open history ") + history_csv_path);
      const std::vector<cs::HistoryRow> rows = cs::read_history_csv(in);
      std::ofstream svg = open("learning_curves.svg");
      cs::render_svg(cs::learning_curve_plot(rows), svg, json{{"history", history_csv_path}}.dump());
      std::ofstream csv = open("learning_curves.csv");
      cs::write_history_csv(rows, csv);
      files.push_back("learning_curves.svg");
      files.push_back("learning_curves.csv");
    }
    *summary_json = dup_string(json{{"trials", log.trials.size()}, {"files", files}}.dump(2));
  });
}

}  // extern "C"
