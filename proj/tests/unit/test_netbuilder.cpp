#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "netbuilder.hpp"
#include "test_util.hpp"

using namespace cellsearch;

namespace {

Tensor image(const NetSkeleton& s, Rng& rng, int batch = 1) {
  return Tensor::uniform({batch, s.image_channels, s.height, s.width}, rng, 0.0, 1.0);
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cellsearch_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("toy search net shapes") {
  const SearchNetConfig cfg = SearchNetConfig::toy();
  const DispNet net = DispNet::search(cfg, 1);
  Rng rng(1);
  const AlphaSet alphas(cfg.skeleton.num_intermediate);
  const auto preds = net.forward(image(cfg.skeleton, rng, 2), image(cfg.skeleton, rng, 2), &alphas);
  REQUIRE(preds.size() == 3);
  CHECK(preds[0].pred.shape() == Shape{2, 1, 2, 4});
  CHECK(preds[0].factor == 16);
  for (size_t i = 1; i < preds.size(); ++i) {
    CHECK(preds[i].pred.shape().h == 2 * preds[i - 1].pred.shape().h);
    CHECK(preds[i].pred.shape().w == 2 * preds[i - 1].pred.shape().w);
    CHECK(preds[i].factor * 2 == preds[i - 1].factor);
  }
  CHECK_THROWS_AS(net.forward(image(cfg.skeleton, rng), image(cfg.skeleton, rng), nullptr), ConfigError);
}

TEST_CASE("zeroed search net predicts zero") {
  const SearchNetConfig cfg = SearchNetConfig::toy();
  const DispNet net = DispNet::search(cfg, 2);
  net.parameters().zero();
  Rng rng(2);
  const AlphaSet alphas(cfg.skeleton.num_intermediate);
  for (const auto& p : net.forward(image(cfg.skeleton, rng), image(cfg.skeleton, rng), &alphas))
    for (double v : p.pred.values()) CHECK(v == 0.0);
}

TEST_CASE("identical views make correlation channel zero dominate") {
  const SearchNetConfig cfg = SearchNetConfig::toy();
  const DispNet net = DispNet::search(cfg, 3);
  Rng rng(3);
  const Tensor img = image(cfg.skeleton, rng);
  const AlphaSet alphas(cfg.skeleton.num_intermediate);
  const Tensor corr = net.correlation_features(img, img, &alphas);
  REQUIRE(corr.shape().c == cfg.skeleton.corr_max_disp + 1);
  // Mean response per displacement over the region where every channel is defined.
  std::vector<double> mean(corr.shape().c, 0.0);
  for (int d = 0; d < corr.shape().c; ++d)
    for (int h = 0; h < corr.shape().h; ++h)
      for (int w = cfg.skeleton.corr_max_disp; w < corr.shape().w; ++w) mean[d] += corr.at(0, d, h, w);
  for (int d = 1; d < corr.shape().c; ++d) CHECK(mean[0] > mean[d]);
}

TEST_CASE("skeleton validation") {
  NetSkeleton s = SearchNetConfig::toy().skeleton;
  s.height = 30;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = SearchNetConfig::toy().skeleton;
  s.decoder_cells = 3;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK(skeleton_from_json(skeleton_to_json(SearchNetConfig::toy().skeleton)).encoder ==
        SearchNetConfig::toy().skeleton.encoder);
}

TEST_CASE("derived nets") {
  const Genotype g = sample_random_genotype(3, 5);
  Rng rng(4);
  SUBCASE("parameter count grows with c_init") {
    size_t last = 0;
    for (int c : {4, 8, 12}) {
      const size_t n = DispNet::derived(DerivedNetConfig::toy(g, true, c), 1).parameters().count();
      CHECK(n > last);
      last = n;
    }
  }
  SUBCASE("single-stream input arity") {
    const DerivedNetConfig cfg = DerivedNetConfig::toy(g, false);
    CHECK(cfg.skeleton.input_channels() == 4);
    DerivedNetConfig rgb = cfg;
    rgb.skeleton.image_channels = 3;
    CHECK(rgb.skeleton.input_channels() == 10);
    const DispNet net = DispNet::derived(cfg, 1);
    const auto preds = net.forward(Tensor::zeros({1, 4, 32, 64}), Tensor());
    CHECK(preds.back().pred.shape() == Shape{1, 1, 8, 16});
    CHECK_THROWS_AS(net.forward(Tensor::zeros({1, 3, 32, 64}), Tensor()), ShapeError);
  }
  SUBCASE("genotype template mismatch") {
    DerivedNetConfig cfg = DerivedNetConfig::toy(sample_random_genotype(2, 1));
    CHECK_THROWS_AS(DispNet::derived(cfg, 1), ConfigError);
  }
}

TEST_CASE("paper-shaped derived net outputs at one quarter resolution") {
  DerivedNetConfig cfg = DerivedNetConfig::paper_shaped(sample_random_genotype(3, 9), true, 4);
  cfg.skeleton.corr_max_disp = 4;
  CHECK(cfg.skeleton.encoder.size() == 7);
  CHECK(cfg.skeleton.decoder_cells == 4);
  CHECK(cfg.skeleton.bottleneck_divisor() == 64);
  CHECK(cfg.skeleton.output_divisor() == 4);
  // Smallest resolution compatible with the 64x downsampling, tiny width.
  cfg.skeleton.height = 64;
  cfg.skeleton.width = 128;
  cfg.skeleton.image_channels = 1;
  const DispNet net = DispNet::derived(cfg, 2);
  Rng rng(5);
  const auto preds = net.forward(image(cfg.skeleton, rng), image(cfg.skeleton, rng));
  REQUIRE(preds.size() == 5);
  CHECK(preds.back().pred.shape() == Shape{1, 1, 16, 32});
  CHECK(preds.back().factor == 4);
}

TEST_CASE("stacks") {
  const Genotype g = sample_random_genotype(3, 11);
  const NetSkeleton base = SearchNetConfig::toy().skeleton;
  Rng rng(6);
  const Tensor l = image(base, rng);
  const Tensor r = image(base, rng);

  SUBCASE("zeroed refinement reproduces the first net bitwise") {
    const int c[3] = {8, 6, 6};
    const DispStack stack = build_stack({"css", true}, g, c, base, 3);
    stack.net(1).parameters().zero();
    stack.net(2).parameters().zero();
    const auto stages = stack.forward(l, r);
    const auto first = stack.net(0).forward(l, r);
    REQUIRE(stages.size() == 3);
    for (size_t s = 0; s < first.size(); ++s) CHECK(testutil::bit_equal(stages[2][s].pred, first[s].pred));
  }
  SUBCASE("stack of one is the single net") {
    const int c[1] = {8};
    const DispStack stack = build_stack({"c", true}, g, c, base, 3);
    DerivedNetConfig dc{g, base};
    const DispNet single = DispNet::derived(dc, derive_seed(3, 0));
    const auto a = stack.final_predictions(l, r);
    const auto b = single.forward(l, r);
    for (size_t s = 0; s < a.size(); ++s) CHECK(testutil::bit_equal(a[s].pred, b[s].pred));
  }
  SUBCASE("frozen nets receive no gradient") {
    const int c[2] = {6, 6};
    const DispStack stack = build_stack({"cs", true}, g, c, base, 4);
    Tape tape;
    Tape::Scope scope(tape);
    const auto preds = stack.final_predictions(l, r);
    const Tensor loss = sum_squares(preds.back().pred);
    const Gradients grads = tape.backward(loss);
    for (const auto& [name, t] : stack.net(0).parameters().items()) CHECK_FALSE(grads.contains(t));
    size_t touched = 0;
    for (const auto& [name, t] : stack.net(1).parameters().items()) touched += grads.contains(t);
    CHECK(touched > 0);
  }
  SUBCASE("role validation") {
    const int c[3] = {8, 8, 8};
    CHECK_THROWS_AS(build_stack({"scs", true}, g, c, base, 1), ConfigError);
    CHECK_THROWS_AS(build_stack({"cc", true}, g, std::span<const int>(c, 2), base, 1), ConfigError);
  }
}

TEST_CASE("checkpoint round trip") {
  const Genotype g = sample_random_genotype(3, 12);
  const DispNet a = DispNet::derived(DerivedNetConfig::toy(g), 1);
  const DispNet b = DispNet::derived(DerivedNetConfig::toy(g), 2);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(a.parameters(), {{"note", "x"}}, a.genotype_hash(), dir);
  const auto manifest = load_checkpoint(b.parameters(), dir);
  CHECK(manifest["genotype_hash"] == g.hash());
  for (size_t i = 0; i < a.parameters().items().size(); ++i)
    CHECK(testutil::bit_equal(a.parameters().items()[i].second, b.parameters().items()[i].second));

  // Flip one byte of the first blob.
  const auto blob = dir / manifest["params"][0]["file"].get<std::string>();
  std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(20);
  f.put('\x7f');
  f.close();
  CHECK_THROWS_AS(load_checkpoint(b.parameters(), dir), CorruptionError);
  std::filesystem::remove_all(dir);
}
