#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <string>

#include "cellsearch.h"
#include "doctest.h"
#include "json.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  cs_string_free(s);
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cellsearch_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("status codes and errors") {
  CHECK(std::string(cs_status_name(CS_OK)) == "ok");
  cs_config* cfg = nullptr;
  CHECK(cs_config_default(nullptr, nullptr) == CS_ERR_NULL_ARGUMENT);
  CHECK(cs_config_default("enormous", &cfg) == CS_ERR_CONFIG);
  CHECK(cfg == nullptr);
  CHECK(std::string(cs_last_error()).find("enormous") != std::string::npos);
  CHECK(cs_config_parse("{not json", &cfg) == CS_ERR_CONFIG);
  CHECK(cs_config_parse(R"({"seeds": 3})", &cfg) == CS_ERR_CONFIG);
  REQUIRE(cs_config_default("toy", &cfg) == CS_OK);
  CHECK(std::string(cs_last_error()).empty());
  cs_config_free(cfg);
  CHECK(cs_genotype_validate("{}") != CS_OK);
  cs_config_free(nullptr);
  cs_string_free(nullptr);
}

TEST_CASE("config patch is atomic") {
  cs_config* cfg = nullptr;
  REQUIRE(cs_config_default("toy", &cfg) == CS_OK);
  char* s = nullptr;
  REQUIRE(cs_config_to_json(cfg, &s) == CS_OK);
  const json before = json::parse(take(s));

  CHECK(cs_config_patch(cfg, R"({"bohb": {"eta": 0.5}})") == CS_ERR_CONFIG);
  REQUIRE(cs_config_to_json(cfg, &s) == CS_OK);
  CHECK(json::parse(take(s)) == before);

  CHECK(cs_config_patch(cfg, R"({"seed": 9, "bohb": {"workers": 2}})") == CS_OK);
  REQUIRE(cs_config_to_json(cfg, &s) == CS_OK);
  const json after = json::parse(take(s));
  CHECK(after["seed"] == 9);
  CHECK(after["bohb"]["workers"] == 2);
  CHECK(after["bohb"]["eta"] == before["bohb"]["eta"]);

  CHECK(cs_config_patch(cfg, R"({"profile": "paper_shaped"})") == CS_OK);
  REQUIRE(cs_config_to_json(cfg, &s) == CS_OK);
  CHECK(json::parse(take(s))["train"]["c_inits"] == json{42, 18, 18});
  cs_config_free(cfg);
}

TEST_CASE("closed form budget") {
  double total = 0.0;
  REQUIRE(cs_bohb_closed_form_budget(1.0 / 9.0, 1.0, 3.0, 9, &total) == CS_OK);
  CHECK(total == doctest::Approx(26.0).epsilon(1e-12));
  CHECK(cs_bohb_closed_form_budget(1.0, 27.0, 1.0, 1, &total) == CS_ERR_CONFIG);
}

TEST_CASE("synthetic bohb, fanova and report through the C API") {
  const fs::path dir = scratch("bohb");
  cs_config* cfg = nullptr;
  REQUIRE(cs_config_default("toy", &cfg) == CS_OK);
  REQUIRE(cs_config_patch(cfg, R"({"seed": 5, "bohb": {"synchronous": true, "n_iterations": 8}})") == CS_OK);
  const std::string log = (dir / "trials.jsonl").string();
  char* s = nullptr;
  REQUIRE(cs_bohb_run(cfg, "synthetic", nullptr, nullptr, nullptr, log.c_str(), &s) == CS_OK);
  const json summary = json::parse(take(s));
  CHECK(summary["total_budget"].get<double>() == summary["closed_form_budget"].get<double>());
  CHECK(summary.contains("incumbent"));

  // Same seed, same log.
  const std::string log2 = (dir / "again.jsonl").string();
  REQUIRE(cs_bohb_run(cfg, "synthetic", nullptr, nullptr, nullptr, log2.c_str(), &s) == CS_OK);
  cs_string_free(s);
  std::ifstream a(log), b(log2);
  CHECK(std::string(std::istreambuf_iterator<char>(a), {}) == std::string(std::istreambuf_iterator<char>(b), {}));

  CHECK(cs_bohb_run(cfg, "restart", nullptr, nullptr, nullptr, nullptr, &s) == CS_ERR_USAGE);
  CHECK(cs_bohb_run(cfg, "sideways", nullptr, nullptr, nullptr, nullptr, &s) == CS_ERR_CONFIG);

  char* report = nullptr;
  char* curves = nullptr;
  REQUIRE(cs_fanova_run(cfg, log.c_str(), 0.0, &report, &curves) == CS_OK);
  const json r = json::parse(take(report));
  CHECK(r["reports"].size() >= 2);
  CHECK(take(curves).rfind("budget,dim,value,mean,std\n", 0) == 0);
  CHECK(cs_fanova_run(cfg, log.c_str(), 2.0, &report, &curves) == CS_ERR_EVALUATION);

  REQUIRE(cs_incumbent_csv(log.c_str(), &s) == CS_OK);
  CHECK(take(s).rfind("wall_time,budget,best_loss\n", 0) == 0);

  REQUIRE(cs_report_render(log.c_str(), nullptr, (dir / "report").string().c_str(), &s) == CS_OK);
  CHECK(json::parse(take(s))["files"].size() == 3);
  CHECK(fs::exists(dir / "report" / "trials.svg"));
  CHECK(cs_report_render((dir / "missing.jsonl").string().c_str(), nullptr, dir.string().c_str(), &s) == CS_ERR_IO);
  cs_config_free(cfg);
}

TEST_CASE("dataset round trip and zeroed refinement") {
  const fs::path dir = scratch("data");
  cs_config* cfg = nullptr;
  REQUIRE(cs_config_default("toy", &cfg) == CS_OK);
  REQUIRE(cs_config_patch(cfg, R"({"data": {"n": 10}, "train": {"stack": "cs", "c_inits": [4, 4], "iters": 2}})") ==
          CS_OK);
  cs_dataset* ds = nullptr;
  REQUIRE(cs_dataset_generate(cfg, &ds) == CS_OK);
  REQUIRE(cs_dataset_save(ds, dir.string().c_str()) == CS_OK);
  cs_dataset* back = nullptr;
  REQUIRE(cs_dataset_load(dir.string().c_str(), &back) == CS_OK);
  char* m1 = nullptr;
  char* m2 = nullptr;
  REQUIRE(cs_dataset_manifest(ds, &m1) == CS_OK);
  REQUIRE(cs_dataset_manifest(back, &m2) == CS_OK);
  CHECK(take(m1) == take(m2));

  char* g = nullptr;
  REQUIRE(cs_random_genotype(3, 1, &g) == CS_OK);
  const std::string genotype = take(g);
  CHECK(cs_genotype_validate(genotype.c_str()) == CS_OK);
  char* res = nullptr;
  REQUIRE(cs_train_run(cfg, back, genotype.c_str(), 1, nullptr, &res) == CS_OK);
  const json r = json::parse(take(res));
  CHECK(r["refinement_identity"]["exact"] == true);
  CHECK(r["params"].size() == 2);
  CHECK(r["output_scales"].back()["factor"] == 4);
  CHECK(std::isfinite(r["final_epe"].get<double>()));
  cs_dataset_free(ds);
  cs_dataset_free(back);
  cs_config_free(cfg);
}
