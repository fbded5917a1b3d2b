#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ops.hpp"
#include "stereodata.hpp"
#include "test_util.hpp"

using namespace cellsearch;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cellsearch_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

GenerateOptions small(uint64_t seed = 3) {
  GenerateOptions o;
  o.n = 20;
  o.seed = seed;
  return o;
}

}  // namespace

TEST_CASE("generation is deterministic and within range") {
  const StereoDataset a = generate_dataset(small());
  const StereoDataset b = generate_dataset(small());
  REQUIRE(a.samples.size() == 20);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(testutil::bit_equal(a.samples[i].left, b.samples[i].left));
    CHECK(testutil::bit_equal(a.samples[i].right, b.samples[i].right));
    CHECK(testutil::bit_equal(a.samples[i].disparity, b.samples[i].disparity));
    for (double d : a.samples[i].disparity.values()) {
      CHECK(d >= 0.0);
      CHECK(d <= 8.0);
    }
  }
  CHECK_FALSE(testutil::bit_equal(generate_dataset(small(4)).samples[0].left, a.samples[0].left));
}

TEST_CASE("splits are disjoint and exhaustive") {
  GenerateOptions o = small();
  o.n = 200;
  const StereoDataset ds = generate_dataset(o);
  const auto tr = ds.indices(Split::kSearchTrain);
  const auto va = ds.indices(Split::kSearchVal);
  const auto te = ds.indices(Split::kTest);
  CHECK(tr.size() == 80);
  CHECK(va.size() == 80);
  CHECK(te.size() == 40);
  CHECK(tr.back() + 1 == va.front());
  CHECK(va.back() + 1 == te.front());
}

TEST_CASE("warping the right view by ground truth reproduces the left view") {
  for (int channels : {1, 3}) {
    GenerateOptions o = small(9);
    o.channels = channels;
    const StereoDataset ds = generate_dataset(o);
    double err = 0.0;
    size_t n = 0;
    for (const StereoSample& s : ds.samples) {
      const Tensor w = warp_horizontal(s.right, s.disparity);
      const Shape sh = s.left.shape();
      for (int c = 0; c < sh.c; ++c)
        for (int y = 0; y < sh.h; ++y)
          for (int x = 0; x < sh.w; ++x) {
            if (s.mask.at(0, 0, y, x) < 0.5) continue;
            err += std::abs(w.at(0, c, y, x) - s.left.at(0, c, y, x));
            ++n;
          }
    }
    CHECK(n > 0);
    CHECK(err / n < 0.02);
  }
}

TEST_CASE("invalid generation options") {
  GenerateOptions o = small();
  o.max_disp = 16.0;
  CHECK_THROWS_AS(generate_dataset(o), ConfigError);
}

TEST_CASE("dataset persistence") {
  const StereoDataset ds = generate_dataset(small());
  const auto dir = temp_dir("data");
  save_dataset(ds, dir);
  const StereoDataset back = load_dataset(dir);
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.manifest.seed == ds.manifest.seed);
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].id == ds.samples[i].id);
    CHECK(testutil::bit_equal(back.samples[i].mask, ds.samples[i].mask));
    CHECK(testutil::bit_equal(back.samples[i].right, ds.samples[i].right));
  }

  SUBCASE("checksum mismatch") {
    std::fstream f(dir / "s00003.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x55');
    f.close();
    CHECK_THROWS_AS(load_dataset(dir), CorruptionError);
  }
  SUBCASE("missing blob names the sample") {
    std::filesystem::remove(dir / "s00007.bin");
    try {
      load_dataset(dir);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("s00007") != std::string::npos);
    }
  }
  SUBCASE("version mismatch") {
    std::ifstream in(dir / "manifest.json");
    auto doc = nlohmann::json::parse(in);
    in.close();
    doc["version"] = 99;
    std::ofstream(dir / "manifest.json") << doc.dump();
    CHECK_THROWS_AS(load_dataset(dir), MigrationError);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation") {
  const StereoDataset ds = generate_dataset(small());
  SUBCASE("perfect predictor") {
    const Predictor oracle = [&](const Tensor& l, const Tensor&) {
      Tensor out({l.shape().n, 1, l.shape().h, l.shape().w});
      // Match each batch row to its sample by content.
      const size_t plane = static_cast<size_t>(l.shape().h) * l.shape().w;
      for (int n = 0; n < l.shape().n; ++n)
        for (const auto& s : ds.samples)
          if (s.left[0] == l[n * plane * l.shape().c] && s.left[1] == l[n * plane * l.shape().c + 1])
            for (size_t i = 0; i < plane; ++i) out[n * plane + i] = s.disparity[i];
      return out;
    };
    CHECK(evaluate(oracle, ds, Split::kTest, 3).epe == 0.0);
  }
  SUBCASE("zero predictor gives mean ground truth") {
    const Predictor zero = [](const Tensor& l, const Tensor&) {
      return Tensor::zeros({l.shape().n, 1, l.shape().h, l.shape().w});
    };
    const EvalReport r = evaluate(zero, ds, Split::kSearchVal, 3);
    double acc = 0.0;
    size_t n = 0;
    for (size_t i : ds.indices(Split::kSearchVal)) {
      const auto& s = ds.samples[i];
      for (size_t p = 0; p < s.mask.numel(); ++p)
        if (s.mask[p] > 0.5) {
          acc += s.disparity[p];
          ++n;
        }
    }
    CHECK(r.pixels == n);
    CHECK(std::abs(r.epe - acc / n) < 1e-10);
    CHECK(r.per_sample.size() == ds.indices(Split::kSearchVal).size());
    std::ostringstream os;
    write_eval_csv(r, os);
    const std::string csv = os.str();
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(r.per_sample.size() + 1));
  }
}

TEST_CASE("batches and crops") {
  const StereoDataset ds = generate_dataset(small());
  BatchStream stream(ds, Split::kSearchTrain, DataTag::kTrain, 4, 1);
  const Batch b = stream.next();
  CHECK(b.left.shape() == Shape{4, 1, 32, 64});
  CHECK(b.tag == DataTag::kTrain);
  Rng rng(1);
  const Batch c = random_crop(b, 16, 32, rng);
  CHECK(c.disparity.shape() == Shape{4, 1, 16, 32});
  CHECK(c.left.shape() == Shape{4, 1, 16, 32});
}
