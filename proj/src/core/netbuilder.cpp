#include "netbuilder.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace cellsearch {

using nlohmann::json;

void ParamList::append(const std::string& prefix, std::span<const Tensor> ts) {
  for (size_t i = 0; i < ts.size(); ++i) add(prefix + "/" + std::to_string(i), ts[i]);
}

std::vector<Tensor> ParamList::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) out.push_back(t);
  return out;
}

size_t ParamList::count() const {
  size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamList::set_trainable(bool on) const {
  for (const auto& [name, t] : items_) {
    Tensor h = t;
    h.set_requires_grad(on);
  }
}

void ParamList::zero() const {
  for (const auto& [name, t] : items_) {
    Tensor h = t;
    h.fill(0.0);
  }
}

// ---------------------------------------------------------------------------
// Configs

std::vector<CellKind> alternating_encoder(int cells) {
  std::vector<CellKind> out;
  for (int i = 0; i < cells; ++i) out.push_back(i % 2 == 0 ? CellKind::kReduction : CellKind::kNormal);
  return out;
}

int NetSkeleton::reductions() const {
  int r = 0;
  for (CellKind k : encoder) r += k == CellKind::kReduction;
  return r;
}

void NetSkeleton::validate() const {
  if (c_init < 1) throw ConfigError("c_init must be positive");
  if (encoder.empty() || encoder.front() != CellKind::kReduction) {
    throw ConfigError("encoder must start with a reduction cell");
  }
  for (CellKind k : encoder) {
    if (k == CellKind::kUpsampling) throw ConfigError("encoder cannot contain upsampling cells");
  }
  if (decoder_cells < 0 || decoder_cells > reductions()) {
    throw ConfigError("decoder cells (" + std::to_string(decoder_cells) + ") must not exceed reduction cells (" +
                      std::to_string(reductions()) + ")");
  }
  const int f = bottleneck_divisor();
  if (height < 1 || width < 1 || height % f != 0 || width % f != 0) {
    throw ConfigError("input resolution " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by the total downsampling factor " + std::to_string(f));
  }
  if (siamese && (corr_max_disp < 0 || corr_max_disp >= width / 8)) {
    throw ConfigError("correlation max displacement " + std::to_string(corr_max_disp) +
                      " must be below the feature width " + std::to_string(width / 8));
  }
  if (image_channels != 1 && image_channels != 3) throw ConfigError("image channels must be 1 or 3");
  if (num_intermediate < 2) throw ConfigError("cells need at least two intermediate nodes for k = 2");
}

SearchNetConfig SearchNetConfig::toy() {
  SearchNetConfig c;
  c.skeleton.c_init = 8;
  c.skeleton.encoder = alternating_encoder(4);
  c.skeleton.decoder_cells = 2;
  c.skeleton.corr_max_disp = 4;
  c.skeleton.height = 32;
  c.skeleton.width = 64;
  return c;
}

SearchNetConfig SearchNetConfig::paper_shaped() {
  SearchNetConfig c;
  c.skeleton.c_init = 24;
  c.skeleton.encoder = alternating_encoder(6);
  c.skeleton.decoder_cells = 3;
  c.skeleton.corr_max_disp = 20;
  c.skeleton.height = 256;
  c.skeleton.width = 512;
  c.skeleton.image_channels = 3;
  return c;
}

DerivedNetConfig DerivedNetConfig::toy(Genotype g, bool siamese, int c_init) {
  DerivedNetConfig c{std::move(g), SearchNetConfig::toy().skeleton};
  c.skeleton.c_init = c_init;
  c.skeleton.siamese = siamese;
  return c;
}

DerivedNetConfig DerivedNetConfig::paper_shaped(Genotype g, bool siamese, int c_init) {
  DerivedNetConfig c{std::move(g), {}};
  c.skeleton.c_init = c_init;
  c.skeleton.encoder = alternating_encoder(7);
  c.skeleton.decoder_cells = 4;
  c.skeleton.corr_max_disp = 40;
  c.skeleton.height = 384;
  c.skeleton.width = 768;
  c.skeleton.image_channels = 3;
  c.skeleton.siamese = siamese;
  return c;
}

json skeleton_to_json(const NetSkeleton& s) {
  json enc = json::array();
  for (CellKind k : s.encoder) enc.push_back(cell_kind_name(k));
  return {{"c_init", s.c_init},         {"encoder", enc},           {"decoder_cells", s.decoder_cells},
          {"corr_max_disp", s.corr_max_disp}, {"height", s.height},   {"width", s.width},
          {"image_channels", s.image_channels}, {"num_intermediate", s.num_intermediate},
          {"siamese", s.siamese},       {"affine", s.affine}};
}

NetSkeleton skeleton_from_json(const json& j) {
  try {
    NetSkeleton s;
    s.c_init = j.at("c_init");
    s.encoder.clear();
    for (const auto& k : j.at("encoder")) s.encoder.push_back(cell_kind_from_name(k.get<std::string>()));
    s.decoder_cells = j.at("decoder_cells");
    s.corr_max_disp = j.at("corr_max_disp");
    s.height = j.at("height");
    s.width = j.at("width");
    s.image_channels = j.at("image_channels");
    s.num_intermediate = j.at("num_intermediate");
    s.siamese = j.at("siamese");
    s.affine = j.at("affine");
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("network skeleton: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// DispNet

DispNet DispNet::search(const SearchNetConfig& cfg, uint64_t seed) {
  DispNet net;
  net.search_ = true;
  net.build(cfg.skeleton, nullptr, seed);
  return net;
}

DispNet DispNet::derived(const DerivedNetConfig& cfg, uint64_t seed) {
  if (cfg.genotype.num_intermediate != cfg.skeleton.num_intermediate) {
    throw ConfigError("genotype has " + std::to_string(cfg.genotype.num_intermediate) +
                      " intermediate nodes, network template expects " + std::to_string(cfg.skeleton.num_intermediate));
  }
  DispNet net;
  net.search_ = false;
  net.genotype_hash_ = cfg.genotype.hash();
  net.build(cfg.skeleton, &cfg.genotype, seed);
  return net;
}

DispNet::Conv DispNet::make_conv(int in, int out, int k, int stride, Rng& rng, const std::string& name, double stddev) {
  Conv c;
  c.spec = make_conv_spec(in, out, k, stride, k / 2);
  const double sd = stddev > 0 ? stddev : std::sqrt(2.0 / (in * k * k));
  c.weight = Tensor::randn(c.spec.weight_shape(), rng, sd).set_requires_grad(true);
  c.bias = Tensor::zeros({1, out, 1, 1}).set_requires_grad(true);
  params_.add(name + "/weight", c.weight);
  params_.add(name + "/bias", c.bias);
  return c;
}

void DispNet::build(const NetSkeleton& skel, const Genotype* genotype, uint64_t seed) {
  skel.validate();
  skel_ = skel;
  Rng rng(seed);
  const int C = skel.c_init;
  const int nint = skel.num_intermediate;
  stem1_ = make_conv(skel.input_channels(), C, 7, 2, rng, "stem1");
  stem2_ = make_conv(C, C, 5, 2, rng, "stem2");

  auto make_cell = [&](CellKind kind, int ch, std::span<const CellInputSpec> ins, int out_div) {
    return genotype ? make_discrete_cell(*genotype, kind, ch, ins, out_div, rng, skel.affine)
                    : make_mixed_cell(kind, nint, ch, ins, out_div, rng, skel.affine);
  };

  CellInputSpec prev_prev{C, 4};
  CellInputSpec prev{C, 4};
  std::map<int, CellInputSpec> skip_specs;
  skip_specs[4] = prev;
  int ch = C;
  int div = 4;
  for (size_t i = 0; i < skel.encoder.size(); ++i) {
    const CellKind kind = skel.encoder[i];
    if (kind == CellKind::kReduction && i > 0) ch *= 2;
    const int out_div = kind == CellKind::kReduction ? div * 2 : div;
    const CellInputSpec ins[2] = {prev_prev, prev};
    CellStage st;
    st.cell = make_cell(kind, ch, ins, out_div);
    st.divisor = out_div;
    st.compress = Tensor::randn({ch, nint * ch, 1, 1}, rng, std::sqrt(2.0 / (nint * ch))).set_requires_grad(true);
    const std::string name = "encoder" + std::to_string(i);
    params_.append(name + "/cell", st.cell.parameters());
    params_.add(name + "/compress", st.compress);
    encoder_.push_back(std::move(st));
    CellInputSpec out{ch, out_div};
    if (i == 0 && skel.siamese) out.channels += skel.corr_max_disp + 1;
    prev_prev = prev;
    prev = out;
    div = out_div;
    skip_specs[div] = out;
  }
  bottleneck_pred_ = make_conv(prev.channels, 1, 3, 1, rng, "pred_bottleneck", 1e-2);

  int up_ch = ch;
  for (int k = 0; k < skel.decoder_cells; ++k) {
    up_ch = std::max(1, up_ch / 2);
    const int target = div / 2;
    const CellInputSpec ins[4] = {prev, prev_prev, {1, div}, skip_specs.at(target)};
    CellStage st;
    st.cell = make_cell(CellKind::kUpsampling, up_ch, ins, target);
    st.divisor = target;
    st.compress =
        Tensor::randn({up_ch, nint * up_ch, 1, 1}, rng, std::sqrt(2.0 / (nint * up_ch))).set_requires_grad(true);
    const std::string name = "decoder" + std::to_string(k);
    params_.append(name + "/cell", st.cell.parameters());
    params_.add(name + "/compress", st.compress);
    st.pred = make_conv(nint * up_ch, 1, 3, 1, rng, name + "/pred", 1e-2);
    decoder_.push_back(std::move(st));
    prev_prev = prev;
    prev = {up_ch, target};
    div = target;
  }
}

Tensor DispNet::run_conv(const Conv& c, const Tensor& x) const { return conv2d(x, c.spec, c.weight, &c.bias); }

Tensor DispNet::stem(const Tensor& x) const { return relu(run_conv(stem2_, relu(run_conv(stem1_, x)))); }

Tensor DispNet::run_stage(const CellStage& s, std::span<const Tensor> inputs, const AlphaSet* alphas,
                          Tensor* cat) const {
  Tensor out = cell_forward(s.cell, inputs, alphas);
  if (cat) *cat = out;
  const int in_c = out.shape().c;
  return conv2d(out, make_conv_spec(in_c, s.compress.shape().n, 1), s.compress);
}

Tensor DispNet::correlation_features(const Tensor& left, const Tensor& right, const AlphaSet* alphas) const {
  if (!skel_.siamese) throw ConfigError("single-stream network has no correlation layer");
  if (search_ && !alphas) throw ConfigError("search network needs architecture parameters");
  const Tensor l0 = stem(left);
  const Tensor r0 = stem(right);
  const Tensor a[2] = {l0, l0};
  const Tensor b[2] = {r0, r0};
  return correlation1d(run_stage(encoder_[0], a, alphas, nullptr), run_stage(encoder_[0], b, alphas, nullptr),
                       skel_.corr_max_disp);
}

std::vector<ScaledPrediction> DispNet::forward(const Tensor& left, const Tensor& right, const AlphaSet* alphas) const {
  if (search_ && !alphas) throw ConfigError("search network needs architecture parameters");
  const Shape expect{left.shape().n, skel_.input_channels(), skel_.height, skel_.width};
  if (left.shape() != expect) throw ShapeError("network input " + left.shape().str() + ", expected " + expect.str());
  if (skel_.siamese != right.defined()) {
    throw ConfigError(skel_.siamese ? "Siamese network needs a right image" : "single-stream network takes one input");
  }
  std::map<int, Tensor> skips;
  const Tensor l0 = stem(left);
  skips[4] = l0;
  Tensor cur;
  if (skel_.siamese) {
    if (right.shape() != expect) throw ShapeError("right image " + right.shape().str() + ", expected " + expect.str());
    const Tensor r0 = stem(right);
    const Tensor a[2] = {l0, l0};
    const Tensor b[2] = {r0, r0};
    const Tensor l1 = run_stage(encoder_[0], a, alphas, nullptr);
    const Tensor r1 = run_stage(encoder_[0], b, alphas, nullptr);
    const Tensor parts[2] = {l1, correlation1d(l1, r1, skel_.corr_max_disp)};
    cur = concat_channels(parts);
  } else {
    const Tensor a[2] = {l0, l0};
    cur = run_stage(encoder_[0], a, alphas, nullptr);
  }
  skips[encoder_[0].divisor] = cur;
  Tensor pp = l0;
  Tensor p = cur;
  for (size_t i = 1; i < encoder_.size(); ++i) {
    const Tensor ins[2] = {pp, p};
    Tensor out = run_stage(encoder_[i], ins, alphas, nullptr);
    skips[encoder_[i].divisor] = out;
    pp = p;
    p = out;
  }
  std::vector<ScaledPrediction> preds;
  Tensor pred = run_conv(bottleneck_pred_, p);
  preds.push_back({pred, skel_.bottleneck_divisor()});
  for (const CellStage& st : decoder_) {
    const Tensor ins[4] = {p, pp, pred, skips.at(st.divisor)};
    Tensor cat;
    Tensor out = run_stage(st, ins, alphas, &cat);
    pred = run_conv(st.pred, cat);
    preds.push_back({pred, st.divisor});
    pp = p;
    p = out;
  }
  return preds;
}

Tensor to_full_resolution(const ScaledPrediction& p) {
  if (p.factor == 1) return p.pred;
  return scalar_mul(bilinear_resize(p.pred, p.factor), static_cast<double>(p.factor));
}

// ---------------------------------------------------------------------------
// Stack

DispStack::DispStack(std::vector<DispNet> nets) : nets_(std::move(nets)) {
  if (nets_.empty()) throw ConfigError("stack needs at least one network");
  if (!nets_.front().skeleton().siamese) throw ConfigError("first network of a stack must be the correlation variant");
  for (size_t i = 1; i < nets_.size(); ++i) {
    const NetSkeleton& s = nets_[i].skeleton();
    if (s.siamese) throw ConfigError("refinement networks must be single-stream");
    if (s.height != nets_[0].skeleton().height || s.width != nets_[0].skeleton().width ||
        s.output_divisor() != nets_[0].skeleton().output_divisor() ||
        s.decoder_cells != nets_[0].skeleton().decoder_cells || s.reductions() != nets_[0].skeleton().reductions()) {
      throw ConfigError("refinement network scales do not match the first network");
    }
  }
  for (size_t i = 0; i < nets_.size(); ++i) {
    for (const auto& [name, t] : nets_[i].parameters().items()) params_.add("net" + std::to_string(i) + "/" + name, t);
  }
}

std::vector<std::vector<ScaledPrediction>> DispStack::forward(const Tensor& left, const Tensor& right) const {
  std::vector<std::vector<ScaledPrediction>> stages;
  stages.push_back(nets_[0].forward(left, right));
  for (size_t i = 1; i < nets_.size(); ++i) {
    const auto& prev = stages.back();
    const Tensor disp = to_full_resolution(prev.back());
    const Tensor parts[4] = {left, right, warp_horizontal(right, disp), disp};
    const auto residuals = nets_[i].forward(concat_channels(parts), Tensor());
    std::vector<ScaledPrediction> refined;
    for (size_t s = 0; s < residuals.size(); ++s) {
      refined.push_back({add(prev[s].pred, residuals[s].pred), prev[s].factor});
    }
    stages.push_back(std::move(refined));
  }
  return stages;
}

void DispStack::set_freeze_previous(bool freeze) const {
  for (size_t i = 0; i < nets_.size(); ++i) nets_[i].parameters().set_trainable(!freeze || i + 1 == nets_.size());
}

DispStack build_stack(const StackConfig& cfg, const Genotype& genotype, std::span<const int> c_inits,
                      const NetSkeleton& base, uint64_t seed) {
  if (cfg.roles.empty() || (cfg.roles[0] != 'c' && cfg.roles[0] != 'C')) {
    throw ConfigError("stack roles must start with 'c', got '" + cfg.roles + "'");
  }
  if (c_inits.size() != cfg.roles.size()) {
    throw ConfigError("stack of " + std::to_string(cfg.roles.size()) + " nets needs as many c_init values");
  }
  std::vector<DispNet> nets;
  for (size_t i = 0; i < cfg.roles.size(); ++i) {
    const char r = cfg.roles[i];
    const bool siamese = r == 'c' || r == 'C';
    if (i > 0 && siamese) throw ConfigError("only the first stack entry may be a correlation network");
    if (!siamese && r != 's' && r != 'S') throw ConfigError(std::string("unknown stack role '") + r + "'");
    DerivedNetConfig dc{genotype, base};
    dc.skeleton.siamese = siamese;
    dc.skeleton.c_init = c_inits[i];
    nets.push_back(DispNet::derived(dc, derive_seed(seed, i)));
  }
  DispStack stack(std::move(nets));
  stack.set_freeze_previous(cfg.freeze_previous);
  return stack;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const ParamList& params, const json& config, const std::string& genotype_hash,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["config"] = config;
  manifest["genotype_hash"] = genotype_hash;
  manifest["params"] = json::array();
  size_t i = 0;
  for (const auto& [name, t] : params.items()) {
    char file[32];
    std::snprintf(file, sizeof file, "p%05zu.bin", i++);
    const auto bytes = tensor_to_bytes(t);
    std::ofstream os(dir / file, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("cannot write " + (dir / file).string());
    char sum[17];
    std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    manifest["params"].push_back({{"name", name}, {"file", file}, {"fnv1a", sum}});
  }
  std::ofstream ms(dir / "manifest.json");
  ms << manifest.dump(2);
  if (!ms) throw IoError("cannot write " + (dir / "manifest.json").string());
}

json load_checkpoint(const ParamList& params, const std::filesystem::path& dir) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw IoError("checkpoint manifest missing in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(ms);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint manifest unreadable: ") + e.what());
  }
  if (manifest.value("version", 0) != 1) throw MigrationError("unsupported checkpoint version");
  std::map<std::string, json> entries;
  for (const auto& p : manifest.at("params")) entries[p.at("name").get<std::string>()] = p;
  for (const auto& [name, t] : params.items()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CorruptionError("checkpoint lacks parameter " + name);
    const auto path = dir / it->second.at("file").get<std::string>();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint blob missing for " + name + ": " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    char sum[17];
    std::snprintf(sum, sizeof sum, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    if (it->second.at("fnv1a").get<std::string>() != sum) throw CorruptionError("checksum mismatch for " + name);
    Tensor loaded = tensor_from_bytes(bytes);
    Tensor target = t;
    if (loaded.shape() != target.shape()) {
      throw CorruptionError("parameter " + name + " has shape " + loaded.shape().str() + ", expected " +
                            target.shape().str());
    }
    target.copy_from(loaded);
  }
  return manifest;
}

}  // namespace cellsearch
