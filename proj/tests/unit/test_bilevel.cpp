#include <filesystem>
#include <sstream>

#include "bilevel.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace cellsearch;

namespace {

const StereoDataset& tiny_data() {
  static const StereoDataset ds = [] {
    GenerateOptions o;
    o.n = 20;
    o.seed = 5;
    return generate_dataset(o);
  }();
  return ds;
}

SearchSchedule short_schedule(int warm, int alt) {
  SearchSchedule s;
  s.warm_start_iters = warm;
  s.alternating_iters = alt;
  s.eval_every = 0;
  return s;
}

SearchNetConfig tiny_net() {
  SearchNetConfig c = SearchNetConfig::toy();
  c.skeleton.c_init = 4;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cellsearch_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

bool alphas_equal(const AlphaSet& a, const AlphaSet& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (!testutil::bit_equal(pa[i], pb[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 1000, 0.025, 0.001) == 0.025);
  CHECK(cosine_lr(1000, 1000, 0.025, 0.001) == 0.001);
  CHECK(cosine_lr(500, 1000, 0.025, 0.001) == doctest::Approx(0.013).epsilon(1e-14));
  for (long t = 1; t <= 1000; ++t) CHECK(cosine_lr(t, 1000, 0.025, 0.001) <= cosine_lr(t - 1, 1000, 0.025, 0.001));
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.025, 0.001), ConfigError);
  CHECK_THROWS_AS(cosine_lr(1001, 1000, 0.025, 0.001), UsageError);
}

TEST_CASE("step schedule") {
  const std::vector<long> m{300, 400, 500};
  CHECK(step_lr(0, m, 0.5, 1e-4) == 1e-4);
  CHECK(step_lr(299, m, 0.5, 1e-4) == 1e-4);
  CHECK(step_lr(300, m, 0.5, 1e-4) == 0.5e-4);
  CHECK(step_lr(450, m, 0.5, 1e-4) == 0.25e-4);
  CHECK(step_lr(500, m, 0.5, 1e-4) == 1e-4 / 8);
  CHECK(step_lr(600000, m, 0.5, 1e-4) == 1e-4 / 8);
  const std::vector<long> unsorted{5, 3};
  CHECK_THROWS_AS(step_lr(0, unsorted, 0.5, 1.0), ConfigError);
}

TEST_CASE("sgd converges on a quadratic") {
  Rng rng(3);
  Tensor w = Tensor::uniform({1, 1, 1, 5}, rng, -2.0, 2.0);
  w.set_requires_grad(true);
  const Tensor c = Tensor::uniform({1, 1, 1, 5}, rng, -1.0, 1.0);
  SgdConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.momentum = 0.5;
  SgdState state;
  const std::vector<Tensor> params{w};
  for (int t = 0; t < 200; ++t) {
    std::vector<std::vector<double>> g(1, std::vector<double>(5));
    for (int k = 0; k < 5; ++k) g[0][k] = w[k] - c[k];
    sgd_step(params, g, cfg, 0.1, state);
  }
  CHECK(testutil::max_abs_diff(w, c) < 1e-6);
}

TEST_CASE("sgd clips the global gradient norm") {
  Tensor a = Tensor::zeros({1, 1, 1, 1});
  Tensor b = Tensor::zeros({1, 1, 1, 1});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  SgdConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.momentum = 0.0;
  cfg.grad_clip = 5.0;
  SgdState state;
  const std::vector<Tensor> params{a, b};
  const std::vector<std::vector<double>> g{{6.0}, {8.0}};
  sgd_step(params, g, cfg, 1.0, state);
  CHECK(a[0] == doctest::Approx(-3.0));
  CHECK(b[0] == doctest::Approx(-4.0));

  cfg.grad_clip = 0.0;
  sgd_step(params, g, cfg, 1.0, state);
  CHECK(a[0] == doctest::Approx(-9.0));
}

TEST_CASE("optimizers skip frozen parameters and check sizes") {
  Tensor a = Tensor::zeros({1, 1, 1, 2});
  const std::vector<Tensor> params{a};
  const std::vector<std::vector<double>> g{{1.0, 1.0}};
  SgdState s;
  AdamState m;
  sgd_step(params, g, SgdConfig{}, 0.1, s);
  adam_step(params, g, AdamConfig{}, 0.1, m);
  CHECK(a[0] == 0.0);
  a.set_requires_grad(true);
  const std::vector<std::vector<double>> bad{{1.0}};
  CHECK_THROWS_AS(sgd_step(params, bad, SgdConfig{}, 0.1, s), UsageError);
  CHECK_THROWS_AS(adam_step(params, {}, AdamConfig{}, 0.1, m), UsageError);
}

TEST_CASE("adam first step has magnitude lr") {
  Tensor w(Shape{1, 1, 1, 3});
  w[0] = 1.0;
  w[1] = -2.0;
  w[2] = 0.5;
  w.set_requires_grad(true);
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  AdamState state;
  const std::vector<Tensor> params{w};
  const std::vector<std::vector<double>> g{{3.0, -0.01, 100.0}};
  adam_step(params, g, cfg, 1e-3, state);
  CHECK(w[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-9));
  CHECK(w[1] == doctest::Approx(-2.0 + 1e-3).epsilon(1e-6));
  CHECK(w[2] == doctest::Approx(0.5 - 1e-3).epsilon(1e-9));
}

TEST_CASE("search steps assert data tags") {
  const StereoDataset& ds = tiny_data();
  const DispNet net = DispNet::search(tiny_net(), 1);
  AlphaSet alphas(tiny_net().skeleton.num_intermediate);
  const SearchSchedule cfg = short_schedule(1, 2);
  BilevelState state;
  const std::vector<size_t> idx{0, 1};
  const Batch train = make_batch(ds, idx, DataTag::kTrain);
  const Batch val = make_batch(ds, idx, DataTag::kVal);

  CHECK_THROWS_AS(alternate_step(net, alphas, train, val, cfg, state), UsageError);
  CHECK_THROWS_AS(search_step(net, alphas, val, nullptr, cfg, state), UsageError);
  search_step(net, alphas, train, nullptr, cfg, state);
  CHECK(state.phase == Phase::kWarmStart);
  CHECK_THROWS_AS(alternate_step(net, alphas, train, train, cfg, state), UsageError);
  CHECK_THROWS_AS(search_step(net, alphas, train, nullptr, cfg, state), UsageError);
  const auto losses = alternate_step(net, alphas, train, val, cfg, state);
  CHECK(state.phase == Phase::kAlternating);
  CHECK(losses.val.has_value());
  for (const UpdateRecord& u : state.updates) {
    CHECK(u.tag == (u.alphas ? DataTag::kVal : DataTag::kTrain));
  }
}

TEST_CASE("warm start leaves alphas exactly at init") {
  const StereoDataset& ds = tiny_data();
  const SearchResult warm = train_search(tiny_net(), short_schedule(3, 0), ds, 2);
  const AlphaSet init(tiny_net().skeleton.num_intermediate);
  CHECK(alphas_equal(warm.alphas, init));
  for (const UpdateRecord& u : warm.updates) CHECK_FALSE(u.alphas);
  CHECK(warm.updates.size() == 3);
  REQUIRE(warm.val_curve.size() == 2);
  CHECK(warm.val_curve.front().first == 0);
  CHECK(warm.val_curve.back().first == 3);

  const SearchResult both = train_search(tiny_net(), short_schedule(2, 2), ds, 2);
  CHECK_FALSE(alphas_equal(both.alphas, init));
  int alpha_updates = 0;
  for (const UpdateRecord& u : both.updates) {
    if (u.alphas) {
      ++alpha_updates;
      CHECK(u.tag == DataTag::kVal);
      CHECK(u.iteration >= 2);
    } else {
      CHECK(u.tag == DataTag::kTrain);
    }
  }
  CHECK(alpha_updates == 2);
  CHECK(both.alphas.temperature() == doctest::Approx(0.2));
  CHECK(both.genotype.meta.at("source") == "search");
}

TEST_CASE("search is deterministic for a seed") {
  const StereoDataset& ds = tiny_data();
  const SearchResult a = train_search(tiny_net(), short_schedule(1, 2), ds, 9);
  const SearchResult b = train_search(tiny_net(), short_schedule(1, 2), ds, 9);
  CHECK(alphas_equal(a.alphas, b.alphas));
  CHECK(a.final_val_epe() == b.final_val_epe());
  CHECK(a.genotype == b.genotype);
  const SearchResult c = train_search(tiny_net(), short_schedule(1, 2), ds, 10);
  CHECK_FALSE(alphas_equal(a.alphas, c.alphas));
}

TEST_CASE("temperature and lr follow the search schedule") {
  SearchSchedule s = short_schedule(10, 20);
  CHECK(search_tau(s, 0) == 1.0);
  CHECK(search_tau(s, 10) == 1.0);
  CHECK(search_tau(s, 20) == doctest::Approx(0.6));
  CHECK(search_tau(s, 30) == doctest::Approx(0.2));
  CHECK(search_lr(s, 0) == s.sgd.lr_base);
  CHECK(search_lr(s, 30) == s.sgd.lr_min);
}

TEST_CASE("history csv") {
  std::vector<HistoryRow> rows{{0, Phase::kWarmStart, 1.5, std::nullopt, 0.025, 1.0},
                               {1, Phase::kAlternating, 1.25, 1.75, 0.02, 0.9}};
  std::ostringstream os;
  write_history_csv(rows, os);
  const std::string s = os.str();
  CHECK(s.rfind("iter,phase,train_epe,val_epe,lr,tau\n", 0) == 0);
  CHECK(s.find("warm_start") != std::string::npos);
  CHECK(s.find("alternating") != std::string::npos);
}

TEST_CASE("frozen stack trains only the newest network") {
  const StereoDataset& ds = tiny_data();
  Rng rng(4);
  StackSpec spec;
  spec.genotype = sample_random_genotype(3, 4);
  spec.stack.roles = "cs";
  spec.stack.freeze_previous = true;
  spec.c_inits = {4, 4};
  spec.skeleton = SearchNetConfig::toy().skeleton;
  spec.seed = 12;
  const DispStack stack = spec.build();
  std::vector<Tensor> before;
  for (const auto& [name, t] : stack.parameters().items()) before.push_back(t.clone());

  DerivedSchedule cfg;
  cfg.iters = 2;
  cfg.batch_size = 2;
  const DerivedResult r = train_derived(stack, ds, cfg, 1);
  CHECK(r.losses.size() == 2);
  CHECK(std::isfinite(r.final_epe));

  const size_t first = stack.net(0).parameters().items().size();
  bool second_changed = false;
  const auto& items = stack.parameters().items();
  for (size_t i = 0; i < items.size(); ++i) {
    if (i < first) {
      CHECK(testutil::bit_equal(items[i].second, before[i]));
    } else if (!testutil::bit_equal(items[i].second, before[i])) {
      second_changed = true;
    }
  }
  CHECK(second_changed);
}

TEST_CASE("snapshot restart resumes from identical weights") {
  const StereoDataset& ds = tiny_data();
  StackSpec spec;
  spec.genotype = sample_random_genotype(3, 8);
  spec.stack.roles = "c";
  spec.c_inits = {4};
  spec.skeleton = SearchNetConfig::toy().skeleton;
  spec.seed = 3;
  const DispStack stack = spec.build();
  DerivedSchedule cfg;
  cfg.iters = 2;
  cfg.batch_size = 2;
  train_derived(stack, ds, cfg, 2);
  const auto dir = temp_dir("restart");
  save_stack_checkpoint(spec, stack, dir);

  auto [spec2, loaded] = load_stack_checkpoint(dir);
  CHECK(spec2.genotype == spec.genotype);
  const auto& a = stack.parameters().items();
  const auto& b = loaded.parameters().items();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(testutil::bit_equal(a[i].second, b[i].second));
  }

  RestartConfig rc;
  rc.budget_iters = 0;
  const double epe = evaluate([&](const Tensor& l, const Tensor& r) { return stack_predict(stack, l, r); }, ds,
                              rc.eval_split)
                         .epe;
  CHECK(snapshot_restart(dir, ds, rc) == epe);

  rc.budget_iters = 2;
  rc.batch_size = 2;
  rc.seed = 6;
  const double r1 = snapshot_restart(dir, ds, rc);
  CHECK(snapshot_restart(dir, ds, rc) == r1);
  rc.budget_iters = -1;
  CHECK_THROWS_AS(snapshot_restart(dir, ds, rc), ConfigError);
  std::filesystem::remove_all(dir);
}
