#include <sstream>
#include <vector>

#include "config.hpp"
#include "doctest.h"
#include "report.hpp"

using namespace cellsearch;
using nlohmann::json;

namespace {

// Minimal well-formedness check: balanced tags, quoted attributes, a single
// root element, escaped text.
bool well_formed_xml(const std::string& s, std::string* why) {
  std::vector<std::string> stack;
  size_t i = 0;
  int roots = 0;
  auto fail = [&](const std::string& m) {
    *why = m + " at offset " + std::to_string(i);
    return false;
  };
  while (i < s.size()) {
    if (s[i] != '<') {
      if (s[i] == '&') {
        const size_t semi = s.find(';', i);
        if (semi == std::string::npos || semi - i > 6) return fail("bad entity");
      } else if (stack.empty() && !std::isspace(static_cast<unsigned char>(s[i]))) {
        return fail("text outside root");
      }
      ++i;
      continue;
    }
    const size_t end = s.find('>', i);
    if (end == std::string::npos) return fail("unterminated tag");
    std::string tag = s.substr(i + 1, end - i - 1);
    if (tag.rfind("?xml", 0) == 0) {
      i = end + 1;
      continue;
    }
    if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return fail("unbalanced quotes");
    if (tag.find('<') != std::string::npos) return fail("'<' inside tag");
    if (tag.front() == '/') {
      const std::string name = tag.substr(1);
      if (stack.empty() || stack.back() != name) return fail("mismatched close " + name);
      stack.pop_back();
    } else {
      const bool self = tag.back() == '/';
      const std::string name = tag.substr(0, tag.find_first_of(" /"));
      if (stack.empty()) ++roots;
      if (!self) stack.push_back(name);
    }
    i = end + 1;
  }
  if (!stack.empty()) return fail("unclosed " + stack.back());
  if (roots != 1) return fail("expected one root");
  return true;
}

std::vector<TrialRecord> some_trials() {
  std::vector<TrialRecord> out;
  const double losses[] = {0.5, 0.3, 0.4, 0.2, 0.25, 0.1};
  const double budgets[] = {1, 1, 3, 3, 9, 9};
  for (int i = 0; i < 6; ++i) {
    TrialRecord t;
    t.config_id = i;
    t.config = {0.1 * i, 0.2};
    t.budget = budgets[i];
    t.loss = losses[i];
    t.wall_time = i + 1.0;
    out.push_back(t);
  }
  TrialRecord f = out[0];
  f.config_id = 6;
  f.status = TrialStatus::kFailed;
  f.loss = std::numeric_limits<double>::infinity();
  f.wall_time = 7.0;
  out.push_back(f);
  return out;
}

}  // namespace

TEST_CASE("run config profiles") {
  const RunConfig toy = RunConfig::toy();
  CHECK_NOTHROW(toy.validate());
  CHECK(toy.search_net.skeleton.c_init == 8);

  const RunConfig paper = RunConfig::paper_shaped();
  CHECK_NOTHROW(paper.validate());
  CHECK(paper.search_net.skeleton.c_init == 24);
  CHECK(paper.search_net.skeleton.encoder.size() == 6);
  CHECK(paper.derived_skeleton.encoder.size() == 7);
  CHECK(paper.train.c_inits == std::vector<int>{42, 18, 18});
  CHECK(paper.bohb.eta == 3.0);
  const auto brackets = hyperband_brackets(paper.bohb.b_min, paper.bohb.b_max, paper.bohb.eta);
  REQUIRE(brackets.size() == 3);
  CHECK(brackets.front().initial_budget == doctest::Approx(paper.bohb.b_max / 9.0));

  CHECK_THROWS_AS(RunConfig::for_profile("huge"), ConfigError);
}

TEST_CASE("run config json") {
  RunConfig c = RunConfig::toy();
  c.seed = 4;
  c.search.alternating_iters = 77;
  c.bohb.workers = 3;
  const json j = c.to_json();
  const RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.search.alternating_iters == 77);
  CHECK(back.bohb.seed == 4);

  const RunConfig paper = RunConfig::from_json(json{{"profile", "paper_shaped"}, {"bohb", {{"workers", 2}}}});
  CHECK(paper.bohb.workers == 2);
  CHECK(paper.train.stack == "css");

  CHECK_THROWS_AS(RunConfig::from_json(json{{"sead", 1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"search", {{"warm_iters", 5}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"data", {{"max_disp", 40.0}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"data", {{"n", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"train", {{"stack", "cs"}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"bohb", {{"eta", 1.0}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json::array()), ConfigError);
}

TEST_CASE("svg output is well formed") {
  const std::vector<TrialRecord> trials = some_trials();
  PlotSpec p = trial_scatter_plot(trials);
  p.title = "a <b> & 'c'";
  std::ostringstream os;
  render_svg(p, os, R"({"note": "x < y"})");
  std::string why;
  CHECK_MESSAGE(well_formed_xml(os.str(), &why), why);
  CHECK(os.str().find("<metadata>") != std::string::npos);

  // Degenerate inputs still render.
  for (PlotSpec q : {PlotSpec{}, learning_curve_plot({})}) {
    std::ostringstream e;
    render_svg(q, e);
    CHECK_MESSAGE(well_formed_xml(e.str(), &why), why);
  }
  std::string bad = "<svg><g></svg>";
  CHECK_FALSE(well_formed_xml(bad, &why));
}

TEST_CASE("trial scatter and incumbent line") {
  const std::vector<TrialRecord> trials = some_trials();
  const PlotSpec p = trial_scatter_plot(trials);
  REQUIRE(p.series.size() == 4);  // three budgets and the incumbent
  const Series& inc = p.series.back();
  CHECK(inc.label == "incumbent");
  for (size_t i = 1; i < inc.points.size(); ++i) {
    CHECK(inc.points[i].second <= inc.points[i - 1].second);
    CHECK(inc.points[i].first >= inc.points[i - 1].first);
  }
  CHECK(inc.points.back().second == 0.1);

  std::ostringstream csv;
  write_trials_csv(trials, SyntheticQuadratic::space(), csv);
  const std::string text = csv.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(trials.size()) + 1);
  CHECK(text.find("failed") != std::string::npos);

  std::ostringstream inc_csv;
  write_incumbent_csv(incumbent_trajectory(trials), inc_csv);
  CHECK(inc_csv.str().rfind("wall_time,budget,best_loss\n", 0) == 0);
}

TEST_CASE("history csv round trip") {
  std::vector<HistoryRow> rows{{0, Phase::kWarmStart, 1.5, std::nullopt, 0.025, 1.0},
                               {1, Phase::kAlternating, 1.25, 1.75, 0.02, 0.9}};
  std::stringstream ss;
  write_history_csv(rows, ss);
  const std::vector<HistoryRow> back = read_history_csv(ss);
  REQUIRE(back.size() == 2);
  CHECK_FALSE(back[0].val_epe.has_value());
  CHECK(back[1].val_epe.value() == 1.75);
  CHECK(back[1].phase == Phase::kAlternating);
  const PlotSpec p = learning_curve_plot(back);
  CHECK(p.series.size() == 2);

  std::istringstream bad_header("iter,phase\n");
  CHECK_THROWS_AS(read_history_csv(bad_header), ParseError);
  std::istringstream bad_row("iter,phase,train_epe,val_epe,lr,tau\n1,sideways,1,,1,1\n");
  CHECK_THROWS_AS(read_history_csv(bad_row), ParseError);
}
