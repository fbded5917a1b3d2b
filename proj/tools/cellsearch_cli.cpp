#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cellsearch.h"
#include "json.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Failure {
  cs_status status;
  std::string message;
};

int exit_code(cs_status s) {
  switch (s) {
    case CS_ERR_CONFIG:
    case CS_ERR_USAGE:
    case CS_ERR_PARSE:
    case CS_ERR_NULL_ARGUMENT:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

void check(cs_status s, const std::string& what) {
  if (s != CS_OK) throw Failure{s, what + ": " + cs_status_name(s) + ": " + cs_last_error()};
}

// Owns a char* from the library.
std::string take(char* s) {
  std::string out = s ? s : "";
  cs_string_free(s);
  return out;
}

struct ConfigDeleter {
  void operator()(cs_config* c) const { cs_config_free(c); }
};
struct DatasetDeleter {
  void operator()(cs_dataset* d) const { cs_dataset_free(d); }
};
struct SearchDeleter {
  void operator()(cs_search* s) const { cs_search_free(s); }
};
using ConfigPtr = std::unique_ptr<cs_config, ConfigDeleter>;
using DatasetPtr = std::unique_ptr<cs_dataset, DatasetDeleter>;
using SearchPtr = std::unique_ptr<cs_search, SearchDeleter>;

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os || !(os << text)) throw Failure{CS_ERR_IO, "cannot write " + p.string()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Failure{CS_ERR_IO, "cannot read " + p.string()};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw Failure{CS_ERR_IO, "cannot create " + p.string() + ": " + ec.message()};
}

struct Common {
  std::string config_path;
  std::string profile;
  std::optional<uint64_t> seed;
  std::string out;

  void add_to(CLI::App* cmd, bool out_required = true) {
    cmd->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--profile", profile, "toy or paper_shaped (ignored with --config)");
    cmd->add_option("--seed", seed, "Run seed");
    auto* o = cmd->add_option("--out", out, "Output directory");
    if (out_required) o->required();
  }

  ConfigPtr load(const json& patch = json::object()) const {
    cs_config* raw = nullptr;
    if (!config_path.empty()) {
      check(cs_config_load(config_path.c_str(), &raw), "loading " + config_path);
    } else {
      check(cs_config_default(profile.empty() ? "toy" : profile.c_str(), &raw), "config");
    }
    ConfigPtr cfg(raw);
    json p = patch;
    if (seed) p["seed"] = *seed;
    if (!p.empty()) check(cs_config_patch(cfg.get(), p.dump().c_str()), "config override");
    return cfg;
  }
};

json config_json(const cs_config* cfg) {
  char* s = nullptr;
  check(cs_config_to_json(cfg, &s), "config");
  return json::parse(take(s));
}

void save_config(const cs_config* cfg, const fs::path& dir) {
  write_file(dir / "config.json", config_json(cfg).dump(2) + "\n");
}

DatasetPtr load_dataset(const std::string& dir) {
  cs_dataset* raw = nullptr;
  check(cs_dataset_load(dir.c_str(), &raw), "loading dataset " + dir);
  return DatasetPtr(raw);
}

// ---------------------------------------------------------------------------

struct GenData {
  Common common;
  std::optional<int> n, height, width, channels;
  std::optional<double> max_disp;
  std::optional<uint64_t> data_seed;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("gen-data", "Generate a synthetic stereo dataset");
    common.add_to(cmd);
    cmd->add_option("--n", n, "Number of samples");
    cmd->add_option("--height", height);
    cmd->add_option("--width", width);
    cmd->add_option("--max-disp", max_disp, "Largest disparity in pixels");
    cmd->add_option("--channels", channels, "1 or 3");
    cmd->add_option("--data-seed", data_seed, "Dataset seed (defaults to --seed)");
    cmd->callback([this] { run(); });
  }

  void run() {
    json data = json::object();
    if (n) data["n"] = *n;
    if (height) data["height"] = *height;
    if (width) data["width"] = *width;
    if (channels) data["channels"] = *channels;
    if (max_disp) data["max_disp"] = *max_disp;
    if (data_seed) {
      data["seed"] = *data_seed;
    } else if (common.seed) {
      data["seed"] = *common.seed;
    }
    const ConfigPtr cfg = common.load(data.empty() ? json::object() : json{{"data", data}});
    cs_dataset* raw = nullptr;
    check(cs_dataset_generate(cfg.get(), &raw), "generating dataset");
    const DatasetPtr ds(raw);
    check(cs_dataset_save(ds.get(), common.out.c_str()), "saving dataset");
    save_config(cfg.get(), common.out);
    char* m = nullptr;
    check(cs_dataset_manifest(ds.get(), &m), "manifest");
    const json manifest = json::parse(take(m));
    std::printf("wrote %d samples to %s\n", manifest.value("count", 0), common.out.c_str());
  }
};

struct Search {
  Common common;
  std::string data;
  int random_cells = 0;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("search", "Architecture search on a dataset");
    common.add_to(cmd);
    cmd->add_option("--data", data, "Dataset directory")->check(CLI::ExistingDirectory);
    cmd->add_option("--random-cells", random_cells, "Emit N random genotypes instead of searching")
        ->check(CLI::NonNegativeNumber);
    cmd->callback([this] { run(); });
  }

  void run() {
    const ConfigPtr cfg = common.load();
    const json c = config_json(cfg.get());
    make_dir(common.out);
    save_config(cfg.get(), common.out);

    if (random_cells > 0) {
      const uint64_t seed = c.at("seed").get<uint64_t>();
      const int k = c.at("search").at("num_intermediate").get<int>();
      for (int i = 0; i < random_cells; ++i) {
        char* g = nullptr;
        check(cs_random_genotype(k, seed * 1000003ULL + static_cast<uint64_t>(i), &g), "random genotype");
        const std::string name = "random_genotype_" + std::to_string(i) + ".json";
        write_file(fs::path(common.out) / name, take(g) + "\n");
      }
      std::printf("wrote %d random genotypes to %s\n", random_cells, common.out.c_str());
      return;
    }
    if (data.empty()) throw Failure{CS_ERR_USAGE, "search needs --data (or --random-cells)"};

    const DatasetPtr ds = load_dataset(data);
    cs_search* raw = nullptr;
    check(cs_search_run(cfg.get(), ds.get(), &raw), "search");
    const SearchPtr s(raw);
    char* text = nullptr;
    const fs::path out(common.out);
    check(cs_search_genotype(s.get(), &text), "genotype");
    const std::string genotype = take(text);
    check(cs_genotype_validate(genotype.c_str()), "genotype");
    write_file(out / "genotype.json", genotype + "\n");
    check(cs_search_alphas(s.get(), &text), "alphas");
    write_file(out / "alphas.json", take(text) + "\n");
    check(cs_search_history_csv(s.get(), &text), "history");
    write_file(out / "history.csv", take(text));
    check(cs_search_summary(s.get(), &text), "summary");
    const json summary = json::parse(take(text));
    write_file(out / "summary.json", summary.dump(2) + "\n");
    std::printf("validation EPE %.4f -> %.4f, genotype %s\n", summary.at("initial_val_epe").get<double>(),
                summary.at("final_val_epe").get<double>(), summary.at("genotype_hash").get<std::string>().c_str());
  }
};

struct Train {
  Common common;
  std::string data;
  std::string genotype;
  std::string stack;
  std::vector<int> c_init;
  std::vector<int> sweep;
  std::optional<bool> freeze_previous;
  bool zero_refinement = false;
  bool save = false;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train", "Train and evaluate a derived net or stack");
    common.add_to(cmd);
    cmd->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--genotype", genotype, "Genotype JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--stack", stack, "c, cs or css")->check(CLI::IsMember({"c", "cs", "css"}));
    cmd->add_option("--c-init", c_init, "Initial channels, one per net or one for all")->delimiter(',');
    cmd->add_option("--sweep-c-init", sweep, "Train once per value of the first net's c_init")->delimiter(',');
    cmd->add_flag("--freeze-previous,!--no-freeze-previous", freeze_previous,
                  "Freeze earlier nets while training a refinement net");
    cmd->add_flag("--zero-refinement", zero_refinement, "Start refinement nets from zero weights");
    cmd->add_flag("--checkpoint", save, "Write trained weights to <out>/checkpoint");
    cmd->callback([this] { run(); });
  }

  json patch_for(const std::vector<int>& inits) const {
    json t = json::object();
    if (!stack.empty()) t["stack"] = stack;
    if (freeze_previous) t["freeze_previous"] = *freeze_previous;
    if (!inits.empty()) t["c_inits"] = inits;
    return t.empty() ? json::object() : json{{"train", t}};
  }

  std::vector<int> expand(std::vector<int> inits) const {
    const size_t nets = stack.empty() ? 0 : stack.size();
    if (inits.size() == 1 && nets > 1) inits.assign(nets, inits.front());
    return inits;
  }

  void run() {
    const DatasetPtr ds = load_dataset(data);
    const std::string g = read_file(genotype);
    const fs::path out(common.out);
    make_dir(out);

    if (sweep.empty()) {
      const ConfigPtr cfg = common.load(patch_for(expand(c_init)));
      save_config(cfg.get(), out);
      const std::string ckpt = (out / "checkpoint").string();
      char* res = nullptr;
      check(cs_train_run(cfg.get(), ds.get(), g.c_str(), zero_refinement, save ? ckpt.c_str() : nullptr, &res),
            "train");
      const json r = json::parse(take(res));
      write_file(out / "train.json", r.dump(2) + "\n");
      std::printf("stack %s params %lld test EPE %.4f\n", r.at("stack").get<std::string>().c_str(),
                  r.at("total_params").get<long long>(), r.at("final_epe").get<double>());
      if (r.contains("refinement_identity")) {
        const json& id = r.at("refinement_identity");
        std::printf("zeroed refinement equals first net: %s (max |diff| %.3g)\n",
                    id.at("exact").get<bool>() ? "yes" : "no", id.at("max_abs_diff").get<double>());
      }
      return;
    }

    std::ostringstream csv;
    csv << "c_init,total_params,final_epe\n";
    json runs = json::array();
    for (int v : sweep) {
      std::vector<int> inits = expand(c_init.empty() ? std::vector<int>{v} : c_init);
      if (inits.empty()) inits = {v};
      inits.front() = v;
      const ConfigPtr cfg = common.load(patch_for(inits));
      if (runs.empty()) save_config(cfg.get(), out);
      char* res = nullptr;
      check(cs_train_run(cfg.get(), ds.get(), g.c_str(), zero_refinement, nullptr, &res), "train");
      const json r = json::parse(take(res));
      csv << v << ',' << r.at("total_params").get<long long>() << ',' << r.at("final_epe").dump() << '\n';
      std::printf("c_init %d params %lld test EPE %.4f\n", v, r.at("total_params").get<long long>(),
                  r.at("final_epe").get<double>());
      runs.push_back(r);
    }
    write_file(out / "c_init_sweep.csv", csv.str());
    write_file(out / "c_init_sweep.json", runs.dump(2) + "\n");
  }
};

struct Bohb {
  Common common;
  bool synthetic = false;
  std::optional<int> workers;
  std::optional<int> iterations;
  std::optional<double> b_max;
  std::optional<double> b_min;
  std::optional<double> max_total_budget;
  bool synchronous = false;
  std::string data;
  std::string checkpoint;
  std::string space;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("bohb", "Hyperparameter search with BOHB");
    common.add_to(cmd);
    cmd->add_flag("--synthetic", synthetic, "Optimise the 2-D synthetic quadratic instead of training");
    cmd->add_option("--workers", workers, "Concurrent workers")->check(CLI::PositiveNumber);
    cmd->add_option("--iterations", iterations, "SuccessiveHalving runs")->check(CLI::PositiveNumber);
    cmd->add_option("--b-min", b_min);
    cmd->add_option("--b-max", b_max);
    cmd->add_option("--max-total-budget", max_total_budget, "Stop dispatching past this total budget");
    cmd->add_flag("--sync", synchronous, "Deterministic single-worker mode");
    cmd->add_option("--data", data, "Dataset directory (training objective)")->check(CLI::ExistingDirectory);
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint to restart from (training objective)")
        ->check(CLI::ExistingDirectory);
    cmd->add_option("--space", space, "Hyperparameter space JSON")->check(CLI::ExistingFile);
    cmd->callback([this] { run(); });
  }

  void run() {
    json b = json::object();
    if (workers) b["workers"] = *workers;
    if (iterations) b["n_iterations"] = *iterations;
    if (b_min) b["b_min"] = *b_min;
    if (b_max) b["b_max"] = *b_max;
    if (max_total_budget) b["max_total_budget"] = *max_total_budget;
    if (synchronous) b["synchronous"] = true;
    const ConfigPtr cfg = common.load(b.empty() ? json::object() : json{{"bohb", b}});
    const fs::path out(common.out);
    make_dir(out);
    save_config(cfg.get(), out);

    DatasetPtr ds;
    if (!synthetic) {
      if (data.empty() || checkpoint.empty()) {
        throw Failure{CS_ERR_USAGE, "bohb needs --synthetic or both --data and --checkpoint"};
      }
      ds = load_dataset(data);
    }
    const std::string space_text = space.empty() ? std::string() : read_file(space);
    const std::string log = (out / "trials.jsonl").string();
    char* res = nullptr;
    check(cs_bohb_run(cfg.get(), synthetic ? "synthetic" : "restart", space.empty() ? nullptr : space_text.c_str(),
                      ds.get(), checkpoint.empty() ? nullptr : checkpoint.c_str(), log.c_str(), &res),
          "bohb");
    const json summary = json::parse(take(res));
    write_file(out / "summary.json", summary.dump(2) + "\n");
    char* inc = nullptr;
    check(cs_incumbent_csv(log.c_str(), &inc), "incumbent");
    write_file(out / "incumbent.csv", take(inc));

    const double used = summary.at("total_budget").get<double>();
    const double closed = summary.at("closed_form_budget").get<double>();
    std::printf("trials %zu (failed %ld)\n", summary.at("n_trials").get<size_t>(), summary.at("n_failed").get<long>());
    std::printf("budget used %.6g, closed form %.6g (%s)\n", used, closed,
                used == closed ? "equal" : (summary.at("capped").get<bool>() ? "capped" : "MISMATCH"));
    if (summary.contains("incumbent")) {
      const json& i = summary.at("incumbent");
      std::printf("incumbent loss %.6g config %s\n", i.at("loss").get<double>(), i.at("config").dump().c_str());
    }
  }
};

struct Fanova {
  Common common;
  std::string trials;
  double budget = 0.0;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("fanova", "Hyperparameter importance from a trial log");
    common.add_to(cmd);
    cmd->add_option("--trials", trials, "trials.jsonl")->required()->check(CLI::ExistingFile);
    cmd->add_option("--budget", budget, "Single budget to analyse (default: every budget with enough trials)");
    cmd->callback([this] { run(); });
  }

  void run() {
    const ConfigPtr cfg = common.load();
    char* report = nullptr;
    char* curves = nullptr;
    check(cs_fanova_run(cfg.get(), trials.c_str(), budget, &report, &curves), "fanova");
    const json r = json::parse(take(report));
    const std::string csv = take(curves);
    const fs::path out(common.out);
    make_dir(out);
    save_config(cfg.get(), out);
    write_file(out / "importance.json", r.dump(2) + "\n");
    write_file(out / "marginals.csv", csv);
    for (const json& rep : r.at("reports")) {
      std::printf("budget %g (%zu trials):", rep.at("budget").get<double>(), rep.at("n_trials").get<size_t>());
      for (const json& d : rep.at("importance")) {
        std::printf(" %s %.3f", d.at("dim").get<std::string>().c_str(), d.at("fraction").get<double>());
      }
      std::printf("\n");
    }
  }
};

struct Report {
  Common common;
  std::string trials;
  std::string history;

  void add(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("report", "Render trial and learning-curve plots");
    common.add_to(cmd);
    cmd->add_option("--trials", trials, "trials.jsonl")->required()->check(CLI::ExistingFile);
    cmd->add_option("--history", history, "history.csv from search")->check(CLI::ExistingFile);
    cmd->callback([this] { run(); });
  }

  void run() {
    const ConfigPtr cfg = common.load();
    char* res = nullptr;
    check(cs_report_render(trials.c_str(), history.empty() ? nullptr : history.c_str(), common.out.c_str(), &res),
          "report");
    save_config(cfg.get(), common.out);
    const json r = json::parse(take(res));
    for (const json& f : r.at("files")) std::printf("wrote %s\n", (fs::path(common.out) / f.get<std::string>()).c_str());
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell-based architecture and hyperparameter search for disparity networks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cs_version());

  GenData gen_data;
  Search search;
  Train train;
  Bohb bohb;
  Fanova fanova;
  Report report;
  gen_data.add(app);
  search.add(app);
  train.add(app);
  bohb.add(app);
  fanova.add(app);
  report.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s\n", f.message.c_str());
    return exit_code(f.status);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return 0;
}
