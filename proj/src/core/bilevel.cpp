#include "bilevel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <ostream>

namespace cellsearch {

using nlohmann::json;

double cosine_lr(long t, long T, double lr_base, double lr_min) {
  if (T <= 0) throw ConfigError("cosine schedule length must be positive");
  if (t < 0 || t > T) throw UsageError("cosine schedule step " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  if (t == 0) return lr_base;
  if (t == T) return lr_min;
  return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / T));
}

double step_lr(long t, std::span<const long> milestones, double factor, double base) {
  if (!std::is_sorted(milestones.begin(), milestones.end())) throw ConfigError("milestones must be sorted");
  double lr = base;
  for (long m : milestones) {
    if (m <= t) lr *= factor;
  }
  return lr;
}

void SgdConfig::validate() const {
  if (!(lr_min > 0.0) || lr_base < lr_min) throw ConfigError("SGD needs lr_base >= lr_min > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("SGD momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
  if (grad_clip < 0.0) throw ConfigError("gradient clip norm must be non-negative");
}

void AdamConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("Adam learning rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight decay must be non-negative");
}

namespace {

void check_grads(std::span<const Tensor> params, std::span<const std::vector<double>> grads) {
  if (params.size() != grads.size()) {
    throw UsageError("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].empty() && grads[i].size() != params[i].numel()) {
      throw UsageError("gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                       " entries, parameter " + params[i].shape().str());
    }
  }
}

void init_buffers(std::vector<std::vector<double>>& bufs, std::span<const Tensor> params) {
  if (bufs.size() == params.size()) return;
  bufs.clear();
  for (const Tensor& p : params) bufs.emplace_back(p.numel(), 0.0);
}

}  // namespace

void sgd_step(std::span<const Tensor> params, std::span<const std::vector<double>> grads, const SgdConfig& cfg,
              double lr, SgdState& state) {
  check_grads(params, grads);
  init_buffers(state.momentum, params);
  double scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    double sq = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
      if (!params[i].requires_grad()) continue;
      for (double g : grads[i]) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) continue;
    Tensor p = params[i];
    auto w = p.values_mut();
    auto& v = state.momentum[i];
    const bool has = !grads[i].empty();
    for (size_t k = 0; k < w.size(); ++k) {
      const double g = (has ? scale * grads[i][k] : 0.0) + cfg.weight_decay * w[k];
      v[k] = cfg.momentum * v[k] + g;
      w[k] -= lr * v[k];
    }
  }
}

void adam_step(std::span<const Tensor> params, std::span<const std::vector<double>> grads, const AdamConfig& cfg,
               double lr, AdamState& state) {
  check_grads(params, grads);
  init_buffers(state.m, params);
  init_buffers(state.v, params);
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad()) continue;
    Tensor p = params[i];
    auto w = p.values_mut();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = !grads[i].empty();
    for (size_t k = 0; k < w.size(); ++k) {
      const double g = (has ? grads[i][k] : 0.0) + cfg.weight_decay * w[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

std::vector<std::vector<double>> gather_grads(const Gradients& g, std::span<const Tensor> params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& p : params) {
    const auto s = g.of(p);
    out.emplace_back(s.begin(), s.end());
  }
  return out;
}

Tensor prediction_loss(std::span<const ScaledPrediction> preds, const Batch& b, std::span<const double> weights) {
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(preds.size(), 1.0);
  return multiscale_epe(preds, b.disparity, w, &b.mask);
}

// ---------------------------------------------------------------------------
// Search

std::string_view phase_name(Phase p) { return p == Phase::kWarmStart ? "warm_start" : "alternating"; }

void SearchSchedule::validate() const {
  if (warm_start_iters < 0 || alternating_iters < 0) throw ConfigError("iteration counts must be non-negative");
  if (warm_start_iters + alternating_iters < 1) throw ConfigError("search needs at least one iteration");
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ConfigError("temperatures must be positive");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  sgd.validate();
  adam.validate();
}

double search_lr(const SearchSchedule& cfg, long t) {
  const long T = cfg.warm_start_iters + cfg.alternating_iters;
  return cosine_lr(std::min(t, T), T, cfg.sgd.lr_base, cfg.sgd.lr_min);
}

double search_tau(const SearchSchedule& cfg, long t) {
  if (t <= cfg.warm_start_iters || cfg.alternating_iters == 0) return cfg.tau_start;
  const double frac = std::min(1.0, static_cast<double>(t - cfg.warm_start_iters) / cfg.alternating_iters);
  return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac;
}

namespace {

void set_trainable(std::span<const Tensor> ts, bool on) {
  for (Tensor t : ts) t.set_requires_grad(on);
}

// Loss on one batch and gradients for `params` only.
std::pair<double, std::vector<std::vector<double>>> loss_and_grads(const DispNet& net, const AlphaSet& alphas,
                                                                   const Batch& b, const SearchSchedule& cfg,
                                                                   std::span<const Tensor> params) {
  Tape tape;
  Tape::Scope scope(tape);
  const auto preds = net.forward(b.left, b.right, &alphas);
  const Tensor loss = prediction_loss(preds, b, cfg.scale_weights);
  const Gradients g = tape.backward(loss);
  return {loss.item(), gather_grads(g, params)};
}

void require_tag(const Batch& b, DataTag expected, const char* what) {
  if (b.tag != expected) {
    throw UsageError(std::string(what) + " update fed a " + std::string(data_tag_name(b.tag)) + " batch, expected " +
                     std::string(data_tag_name(expected)));
  }
}

}  // namespace

StepLosses search_step(const DispNet& net, AlphaSet& alphas, const Batch& train, const Batch* val,
                       const SearchSchedule& cfg, BilevelState& state) {
  const long t = state.iteration;
  state.phase = t < cfg.warm_start_iters ? Phase::kWarmStart : Phase::kAlternating;
  alphas.set_temperature(search_tau(cfg, t));
  const std::vector<Tensor> w = net.parameters().tensors();
  const std::vector<Tensor> a = alphas.parameters();
  StepLosses out;

  require_tag(train, DataTag::kTrain, "weight");
  set_trainable(a, false);
  set_trainable(w, true);
  auto [train_loss, gw] = loss_and_grads(net, alphas, train, cfg, w);
  sgd_step(w, gw, cfg.sgd, search_lr(cfg, t), state.sgd);
  state.updates.push_back({t, false, train.tag});
  out.train = train_loss;

  if (state.phase == Phase::kAlternating) {
    if (!val) throw UsageError("alternating phase needs a validation batch");
    require_tag(*val, DataTag::kVal, "architecture");
    set_trainable(w, false);
    set_trainable(a, true);
    // First order: gradients at the current weights, no unrolled step.
    auto [val_loss, ga] = loss_and_grads(net, alphas, *val, cfg, a);
    adam_step(a, ga, cfg.adam, cfg.adam.lr, state.adam);
    state.updates.push_back({t, true, val->tag});
    out.val = val_loss;
    set_trainable(w, true);
    set_trainable(a, false);
  }
  ++state.iteration;
  return out;
}

StepLosses alternate_step(const DispNet& net, AlphaSet& alphas, const Batch& train, const Batch& val,
                          const SearchSchedule& cfg, BilevelState& state) {
  if (state.iteration < cfg.warm_start_iters) throw UsageError("alternate_step called during warm start");
  return search_step(net, alphas, train, &val, cfg, state);
}

double search_net_epe(const DispNet& net, const AlphaSet& alphas, const StereoDataset& data, Split split) {
  const Predictor p = [&](const Tensor& l, const Tensor& r) {
    return to_full_resolution(net.forward(l, r, &alphas).back());
  };
  return evaluate(p, data, split).epe;
}

SearchResult train_search(const SearchNetConfig& net_cfg, const SearchSchedule& cfg, const StereoDataset& data,
                          uint64_t seed) {
  cfg.validate();
  SearchNetConfig nc = net_cfg;
  nc.skeleton.height = data.manifest.height;
  nc.skeleton.width = data.manifest.width;
  nc.skeleton.image_channels = data.manifest.channels;
  const DispNet net = DispNet::search(nc, derive_seed(seed, 1));
  SearchResult res;
  res.alphas = AlphaSet(nc.skeleton.num_intermediate, cfg.tau_start);
  BatchStream train(data, Split::kSearchTrain, DataTag::kTrain, cfg.batch_size, derive_seed(seed, 2));
  BatchStream val(data, Split::kSearchVal, DataTag::kVal, cfg.batch_size, derive_seed(seed, 3));
  BilevelState state;
  const long T = cfg.warm_start_iters + cfg.alternating_iters;
  res.val_curve.emplace_back(0, search_net_epe(net, res.alphas, data, Split::kSearchVal));
  for (long t = 0; t < T; ++t) {
    const Batch tb = train.next();
    const double lr = search_lr(cfg, t);
    StepLosses l;
    if (t < cfg.warm_start_iters) {
      l = search_step(net, res.alphas, tb, nullptr, cfg, state);
    } else {
      const Batch vb = val.next();
      l = alternate_step(net, res.alphas, tb, vb, cfg, state);
    }
    res.history.push_back({t, state.phase, l.train, l.val, lr, res.alphas.temperature()});
    const long done = t + 1;
    res.alphas.set_temperature(search_tau(cfg, done));
    if (done == T || (cfg.eval_every > 0 && done % cfg.eval_every == 0)) {
      res.val_curve.emplace_back(done, search_net_epe(net, res.alphas, data, Split::kSearchVal));
    }
  }
  res.updates = std::move(state.updates);
  res.genotype = discretize(res.alphas);
  res.genotype.meta = {{"source", "search"}, {"seed", seed}, {"iterations", T}};
  return res;
}

void write_history_csv(const std::vector<HistoryRow>& rows, std::ostream& os) {
  os << "iter,phase,train_epe,val_epe,lr,tau\n";
  char buf[160];
  for (const HistoryRow& r : rows) {
    char val[32] = "";
    if (r.val_epe) std::snprintf(val, sizeof val, "%.10g", *r.val_epe);
    std::snprintf(buf, sizeof buf, "%ld,%s,%.10g,%s,%.10g,%.10g\n", r.iteration, std::string(phase_name(r.phase)).c_str(),
                  r.train_epe, val, r.lr, r.tau);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Derived training

void DerivedSchedule::validate() const {
  if (iters < 0) throw ConfigError("iterations must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  adam.validate();
  if (!std::is_sorted(milestones.begin(), milestones.end())) throw ConfigError("milestones must be sorted");
}

Tensor stack_predict(const DispStack& stack, const Tensor& left, const Tensor& right) {
  return to_full_resolution(stack.final_predictions(left, right).back());
}

namespace {

std::vector<Tensor> trainable(const DispStack& stack) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : stack.parameters().items()) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

double stack_epe(const DispStack& stack, const StereoDataset& data, Split split) {
  return evaluate([&](const Tensor& l, const Tensor& r) { return stack_predict(stack, l, r); }, data, split).epe;
}

}  // namespace

DerivedResult train_derived(const DispStack& stack, const StereoDataset& data, const DerivedSchedule& cfg,
                            uint64_t seed) {
  cfg.validate();
  const std::vector<Tensor> params = trainable(stack);
  std::vector<long> milestones;
  for (double f : cfg.milestones) milestones.push_back(std::lround(f * cfg.iters));
  BatchStream stream(data, cfg.train_split, DataTag::kTrain, cfg.batch_size, derive_seed(seed, 7));
  AdamState state;
  DerivedResult res;
  for (int t = 0; t < cfg.iters; ++t) {
    const Batch b = stream.next();
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor loss = prediction_loss(stack.final_predictions(b.left, b.right), b, cfg.scale_weights);
    const Gradients g = tape.backward(loss);
    adam_step(params, gather_grads(g, params), cfg.adam, step_lr(t, milestones, cfg.drop, cfg.adam.lr), state);
    res.losses.push_back(loss.item());
  }
  res.final_epe = stack_epe(stack, data, cfg.eval_split);
  return res;
}

DispStack StackSpec::build() const {
  return build_stack(stack, genotype, c_inits, skeleton, seed);
}

json StackSpec::to_json() const {
  return {{"genotype", json::parse(genotype_to_json(genotype))},
          {"roles", stack.roles},
          {"freeze_previous", stack.freeze_previous},
          {"c_inits", c_inits},
          {"skeleton", skeleton_to_json(skeleton)},
          {"seed", seed}};
}

StackSpec StackSpec::from_json(const json& j) {
  try {
    StackSpec s;
    s.genotype = genotype_from_json(j.at("genotype").dump());
    s.stack.roles = j.at("roles");
    s.stack.freeze_previous = j.at("freeze_previous");
    s.c_inits = j.at("c_inits").get<std::vector<int>>();
    s.skeleton = skeleton_from_json(j.at("skeleton"));
    s.seed = j.at("seed");
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("stack description: ") + e.what());
  }
}

void save_stack_checkpoint(const StackSpec& spec, const DispStack& stack, const std::filesystem::path& dir) {
  save_checkpoint(stack.parameters(), spec.to_json(), spec.genotype.hash(), dir);
}

std::pair<StackSpec, DispStack> load_stack_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("checkpoint manifest missing in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("checkpoint manifest unreadable: ") + e.what());
  }
  StackSpec spec = StackSpec::from_json(manifest.at("config"));
  if (manifest.value("genotype_hash", "") != spec.genotype.hash()) {
    throw CorruptionError("checkpoint genotype hash does not match its genotype");
  }
  DispStack stack = spec.build();
  load_checkpoint(stack.parameters(), dir);
  return {std::move(spec), std::move(stack)};
}

double snapshot_restart(const std::filesystem::path& checkpoint, const StereoDataset& data, const RestartConfig& cfg) {
  if (cfg.budget_iters < 0) throw ConfigError("budget must be non-negative");
  if (!(cfg.lr >= 0.0) || !(cfg.weight_decay >= 0.0)) throw ConfigError("learning rate and decay must be non-negative");
  auto [spec, stack] = load_stack_checkpoint(checkpoint);
  const std::vector<Tensor> params = trainable(stack);
  BatchStream stream(data, cfg.train_split, DataTag::kTrain, cfg.batch_size, derive_seed(cfg.seed, 11));
  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  AdamState state;
  for (long t = 0; t < cfg.budget_iters; ++t) {
    const Batch b = stream.next();
    Tape tape;
    Tape::Scope scope(tape);
    const Tensor loss = prediction_loss(stack.final_predictions(b.left, b.right), b, {});
    const Gradients g = tape.backward(loss);
    adam_step(params, gather_grads(g, params), adam, cosine_lr(t, cfg.budget_iters, cfg.lr, 0.0), state);
  }
  return stack_epe(stack, data, cfg.eval_split);
}

}  // namespace cellsearch
