#include "stereodata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace cellsearch {

using nlohmann::json;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kSearchTrain: return "search-train";
    case Split::kSearchVal: return "search-val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_name(std::string_view name) {
  for (Split s : {Split::kSearchTrain, Split::kSearchVal, Split::kTest}) {
    if (split_name(s) == name) return s;
  }
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

std::string_view data_tag_name(DataTag t) {
  switch (t) {
    case DataTag::kTrain: return "train";
    case DataTag::kVal: return "val";
    case DataTag::kTest: return "test";
  }
  return "?";
}

std::vector<size_t> StereoDataset::indices(Split s) const {
  size_t lo = 0;
  size_t hi = 0;
  switch (s) {
    case Split::kSearchTrain: hi = manifest.train_end; break;
    case Split::kSearchVal:
      lo = manifest.train_end;
      hi = manifest.val_end;
      break;
    case Split::kTest:
      lo = manifest.val_end;
      hi = manifest.count;
      break;
  }
  std::vector<size_t> out(hi - lo);
  std::iota(out.begin(), out.end(), lo);
  return out;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

// Value noise from an integer lattice hash, smoothstep-interpolated, three
// octaves. Depends only on integer hashing and IEEE arithmetic.
class Texture {
 public:
  explicit Texture(uint64_t seed) : seed_(seed) {}

  double operator()(double x, double y) const {
    double v = 0.0;
    double amp = 0.55;
    double cell = 7.0;
    double norm = 0.0;
    for (int o = 0; o < 3; ++o) {
      v += amp * octave(x / cell, y / cell, o);
      norm += amp;
      amp *= 0.5;
      cell *= 0.5;
    }
    return v / norm;
  }

 private:
  double lattice(int64_t ix, int64_t iy, int octave) const {
    const uint64_t h = mix64(seed_ ^ mix64(static_cast<uint64_t>(ix) * 0x9e3779b97f4a7c15ULL ^
                                           mix64(static_cast<uint64_t>(iy) + 0x51ed27ULL * (octave + 1))));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
  }

  double octave(double x, double y, int o) const {
    const double fx = std::floor(x);
    const double fy = std::floor(y);
    const auto ix = static_cast<int64_t>(fx);
    const auto iy = static_cast<int64_t>(fy);
    auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
    const double tx = smooth(x - fx);
    const double ty = smooth(y - fy);
    const double a = lattice(ix, iy, o) * (1 - tx) + lattice(ix + 1, iy, o) * tx;
    const double b = lattice(ix, iy + 1, o) * (1 - tx) + lattice(ix + 1, iy + 1, o) * tx;
    return a * (1 - ty) + b * ty;
  }

  uint64_t seed_;
};

struct Layer {
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;  // in left-image pixels, half-open; background covers all
  double disp = 0.0;
  bool background = false;
  std::vector<Texture> tex;  // one per channel

  bool covers_left(int x, int y) const { return background || (x >= x0 && x < x1 && y >= y0 && y < y1); }
  // Right-view footprint is the left footprint shifted by -disp.
  bool covers_right(double xr, int y) const {
    return background || (xr + disp >= x0 && xr + disp < x1 && y >= y0 && y < y1);
  }
};

// Index of the closest layer (largest disparity) covering the point.
int top_left(const std::vector<Layer>& layers, int x, int y) {
  int best = 0;
  for (size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].covers_left(x, y) && layers[i].disp > layers[best].disp) best = static_cast<int>(i);
  }
  return best;
}

int top_right(const std::vector<Layer>& layers, double xr, int y) {
  int best = 0;
  for (size_t i = 1; i < layers.size(); ++i) {
    if (layers[i].covers_right(xr, y) && layers[i].disp > layers[best].disp) best = static_cast<int>(i);
  }
  return best;
}

StereoSample render_sample(const GenerateOptions& opt, uint64_t seed, int index) {
  Rng rng(seed);
  const int H = opt.height;
  const int W = opt.width;
  const int C = opt.channels;
  std::vector<Layer> layers;
  auto textures = [&] {
    std::vector<Texture> t;
    for (int c = 0; c < C; ++c) t.emplace_back(rng.next_u64());
    return t;
  };
  Layer bg;
  bg.background = true;
  bg.disp = rng.uniform(0.5, 0.75 * opt.max_disp);
  bg.tex = textures();
  layers.push_back(std::move(bg));
  const int rects = 1 + static_cast<int>(rng.below(4));
  for (int r = 0; r < rects; ++r) {
    Layer l;
    const int rw = std::max(2, static_cast<int>(rng.uniform(W / 8.0, W / 3.0)));
    const int rh = std::max(2, static_cast<int>(rng.uniform(H / 6.0, H / 2.0)));
    l.x0 = static_cast<int>(rng.below(static_cast<uint64_t>(W - rw + 1)));
    l.y0 = static_cast<int>(rng.below(static_cast<uint64_t>(H - rh + 1)));
    l.x1 = l.x0 + rw;
    l.y1 = l.y0 + rh;
    l.disp = rng.uniform(layers[0].disp + 0.5, opt.max_disp);
    l.tex = textures();
    layers.push_back(std::move(l));
  }

  StereoSample s;
  char id[16];
  std::snprintf(id, sizeof id, "s%05d", index);
  s.id = id;
  s.left = Tensor::zeros({1, C, H, W});
  s.right = Tensor::zeros({1, C, H, W});
  s.disparity = Tensor::zeros({1, 1, H, W});
  s.mask = Tensor::zeros({1, 1, H, W});
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      // Left view: the layer's texture in its own coordinates, which for the
      // left camera coincide with image coordinates.
      const int li = top_left(layers, x, y);
      const Layer& L = layers[li];
      for (int c = 0; c < C; ++c) s.left.at(0, c, y, x) = L.tex[c](x, y);
      s.disparity.at(0, 0, y, x) = L.disp;
      // Right view: a right pixel xr shows scene point xr + disp of its top layer.
      const int ri = top_right(layers, x, y);
      for (int c = 0; c < C; ++c) s.right.at(0, c, y, x) = layers[ri].tex[c](x + layers[ri].disp, y);
      // Valid when both right pixels bracketing x - disp exist and show the same layer.
      const double xr = x - L.disp;
      const double f0 = std::floor(xr);
      const bool in_frame = f0 >= 0.0 && f0 + 1.0 <= W - 1;
      const bool visible = in_frame && top_right(layers, f0, y) == li && top_right(layers, f0 + 1.0, y) == li;
      s.mask.at(0, 0, y, x) = visible ? 1.0 : 0.0;
    }
  }
  return s;
}

}  // namespace

StereoDataset generate_dataset(const GenerateOptions& opt) {
  if (opt.n < 1) throw ConfigError("dataset needs at least one sample");
  if (opt.height < 4 || opt.width < 8) throw ConfigError("dataset resolution too small");
  if (!(opt.max_disp > 1.0) || opt.max_disp >= opt.width / 4.0) {
    throw ConfigError("max disparity " + std::to_string(opt.max_disp) + " must lie in (1, width/4 = " +
                      std::to_string(opt.width / 4.0) + ")");
  }
  if (opt.channels != 1 && opt.channels != 3) throw ConfigError("images must have 1 or 3 channels");
  StereoDataset ds;
  DatasetManifest& m = ds.manifest;
  m.count = opt.n;
  m.height = opt.height;
  m.width = opt.width;
  m.channels = opt.channels;
  m.max_disp = opt.max_disp;
  m.seed = opt.seed;
  m.train_end = static_cast<int>(std::lround(opt.n * 0.4));
  m.val_end = m.train_end + static_cast<int>(std::lround(opt.n * 0.4));
  ds.samples.reserve(opt.n);
  for (int i = 0; i < opt.n; ++i) ds.samples.push_back(render_sample(opt, derive_seed(opt.seed, i), i));
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

json manifest_to_json(const DatasetManifest& m) {
  return {{"version", DatasetManifest::kVersion},
          {"count", m.count},
          {"height", m.height},
          {"width", m.width},
          {"channels", m.channels},
          {"max_disp", m.max_disp},
          {"seed", m.seed},
          {"splits", {{"search_train_end", m.train_end}, {"search_val_end", m.val_end}}}};
}

void save_dataset(const StereoDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json doc = manifest_to_json(ds.manifest);
  doc["samples"] = json::array();
  for (const StereoSample& s : ds.samples) {
    std::ostringstream os;
    for (const Tensor* t : {&s.left, &s.right, &s.disparity, &s.mask}) write_tensor(os, *t);
    const std::string bytes = os.str();
    const std::string file = s.id + ".bin";
    std::ofstream out(dir / file, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + (dir / file).string());
    doc["samples"].push_back({{"id", s.id}, {"file", file}, {"fnv1a", hex64(fnv1a64(bytes.data(), bytes.size()))}});
  }
  std::ofstream mf(dir / "manifest.json");
  mf << doc.dump(2) << "\n";
  if (!mf) throw IoError("cannot write " + (dir / "manifest.json").string());
}

StereoDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw IoError("dataset manifest not found in " + dir.string());
  json doc;
  try {
    doc = json::parse(mf);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("dataset manifest unreadable: ") + e.what());
  }
  const int version = doc.value("version", 0);
  if (version != DatasetManifest::kVersion) {
    throw MigrationError("dataset version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(DatasetManifest::kVersion) + ")");
  }
  StereoDataset ds;
  try {
    DatasetManifest& m = ds.manifest;
    m.count = doc.at("count");
    m.height = doc.at("height");
    m.width = doc.at("width");
    m.channels = doc.at("channels");
    m.max_disp = doc.at("max_disp");
    m.seed = doc.at("seed");
    m.train_end = doc.at("splits").at("search_train_end");
    m.val_end = doc.at("splits").at("search_val_end");
    for (const auto& entry : doc.at("samples")) {
      const std::string id = entry.at("id");
      const auto path = dir / entry.at("file").get<std::string>();
      std::ifstream in(path, std::ios::binary);
      if (!in) throw IoError("sample " + id + ": blob " + path.string() + " is missing");
      const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      if (hex64(fnv1a64(bytes.data(), bytes.size())) != entry.at("fnv1a").get<std::string>()) {
        throw CorruptionError("sample " + id + ": checksum mismatch");
      }
      std::istringstream is(bytes);
      StereoSample s;
      s.id = id;
      s.left = read_tensor(is);
      s.right = read_tensor(is);
      s.disparity = read_tensor(is);
      s.mask = read_tensor(is);
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("dataset manifest malformed: ") + e.what());
  }
  if (static_cast<int>(ds.samples.size()) != ds.manifest.count) {
    throw CorruptionError("manifest lists " + std::to_string(ds.samples.size()) + " samples, count says " +
                          std::to_string(ds.manifest.count));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

namespace {

Tensor stack_batch(const StereoDataset& ds, std::span<const size_t> idx, Tensor StereoSample::*field) {
  const Shape one = (ds.samples.at(idx[0]).*field).shape();
  Tensor out({static_cast<int>(idx.size()), one.c, one.h, one.w});
  auto dst = out.values_mut();
  const size_t stride = one.numel();
  for (size_t b = 0; b < idx.size(); ++b) {
    const auto src = (ds.samples.at(idx[b]).*field).values();
    std::copy(src.begin(), src.end(), dst.begin() + b * stride);
  }
  return out;
}

Tensor crop(const Tensor& t, int y0, int x0, int h, int w) {
  const Shape s = t.shape();
  Tensor out({s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(n, c, y, x) = t.at(n, c, y0 + y, x0 + x);
  return out;
}

}  // namespace

Batch make_batch(const StereoDataset& ds, std::span<const size_t> indices, DataTag tag) {
  if (indices.empty()) throw UsageError("empty batch");
  return {stack_batch(ds, indices, &StereoSample::left), stack_batch(ds, indices, &StereoSample::right),
          stack_batch(ds, indices, &StereoSample::disparity), stack_batch(ds, indices, &StereoSample::mask), tag};
}

Batch random_crop(const Batch& b, int height, int width, Rng& rng) {
  const Shape s = b.left.shape();
  if (height > s.h || width > s.w) throw ConfigError("crop larger than the images");
  if (height == s.h && width == s.w) return b;
  const int y0 = static_cast<int>(rng.below(static_cast<uint64_t>(s.h - height + 1)));
  const int x0 = static_cast<int>(rng.below(static_cast<uint64_t>(s.w - width + 1)));
  return {crop(b.left, y0, x0, height, width), crop(b.right, y0, x0, height, width),
          crop(b.disparity, y0, x0, height, width), crop(b.mask, y0, x0, height, width), b.tag};
}

BatchStream::BatchStream(const StereoDataset& ds, Split split, DataTag tag, int batch_size, uint64_t seed)
    : ds_(&ds), pool_(ds.indices(split)), tag_(tag), batch_size_(batch_size), rng_(seed) {
  if (pool_.empty()) throw ConfigError("split " + std::string(split_name(split)) + " is empty");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  cursor_ = pool_.size();
}

Batch BatchStream::next() {
  std::vector<size_t> idx;
  while (static_cast<int>(idx.size()) < batch_size_) {
    if (cursor_ >= pool_.size()) {
      for (size_t i = pool_.size(); i > 1; --i) std::swap(pool_[i - 1], pool_[rng_.below(i)]);
      cursor_ = 0;
    }
    idx.push_back(pool_[cursor_++]);
  }
  return make_batch(*ds_, idx, tag_);
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const Predictor& predict, const StereoDataset& ds, Split split, int batch_size) {
  const auto idx = ds.indices(split);
  if (idx.empty()) throw EvaluationError("split " + std::string(split_name(split)) + " is empty");
  EvalReport r;
  double total = 0.0;
  for (size_t start = 0; start < idx.size(); start += batch_size) {
    const size_t end = std::min(idx.size(), start + static_cast<size_t>(batch_size));
    const std::span<const size_t> chunk(idx.data() + start, end - start);
    const Batch b = make_batch(ds, chunk, DataTag::kTest);
    const Tensor pred = predict(b.left, b.right);
    if (pred.shape() != b.disparity.shape()) {
      throw ShapeError("predictor returned " + pred.shape().str() + ", expected " + b.disparity.shape().str());
    }
    const size_t plane = b.disparity.shape().numel() / chunk.size();
    for (size_t s = 0; s < chunk.size(); ++s) {
      double err = 0.0;
      size_t n = 0;
      for (size_t i = s * plane; i < (s + 1) * plane; ++i) {
        if (b.mask[i] > 0.5) {
          err += std::abs(pred[i] - b.disparity[i]);
          ++n;
        }
      }
      total += err;
      r.pixels += n;
      r.per_sample.emplace_back(ds.samples[chunk[s]].id, n ? err / n : 0.0);
    }
  }
  if (r.pixels == 0) throw EvaluationError("no valid pixels in split " + std::string(split_name(split)));
  r.epe = total / static_cast<double>(r.pixels);
  return r;
}

void write_eval_csv(const EvalReport& r, std::ostream& os) {
  os << "sample,epe\n";
  char buf[64];
  for (const auto& [id, e] : r.per_sample) {
    std::snprintf(buf, sizeof buf, "%.10g", e);
    os << id << "," << buf << "\n";
  }
}

}  // namespace cellsearch
