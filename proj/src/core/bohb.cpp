#include "bohb.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace cellsearch {

using nlohmann::json;

namespace {

constexpr int kTrialLogVersion = 1;
constexpr const char* kTrialLogSchema = "cellsearch-trials";

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

}  // namespace

std::string_view dim_kind_name(DimKind k) {
  switch (k) {
    case DimKind::kUniform:
      return "uniform";
    case DimKind::kLogUniform:
      return "log-uniform";
    case DimKind::kInteger:
      return "integer";
    case DimKind::kCategorical:
      return "categorical";
  }
  return "?";
}

DimKind dim_kind_from_name(std::string_view s) {
  if (s == "uniform") return DimKind::kUniform;
  if (s == "log-uniform") return DimKind::kLogUniform;
  if (s == "integer") return DimKind::kInteger;
  if (s == "categorical") return DimKind::kCategorical;
  throw ConfigError("unknown dimension kind '" + std::string(s) + "'");
}

HyperparamSpace::HyperparamSpace(std::vector<Dim> dims) : dims_(std::move(dims)) {
  if (dims_.empty()) throw ConfigError("search space has no dimensions");
  for (size_t i = 0; i < dims_.size(); ++i) {
    const Dim& d = dims_[i];
    if (d.name.empty()) throw ConfigError("dimension " + std::to_string(i) + " has no name");
    for (size_t j = 0; j < i; ++j) {
      if (dims_[j].name == d.name) throw ConfigError("duplicate dimension '" + d.name + "'");
    }
    if (d.categorical()) {
      if (d.categories.empty()) throw ConfigError("categorical '" + d.name + "' has no categories");
      continue;
    }
    if (!std::isfinite(d.low) || !std::isfinite(d.high) || !(d.low < d.high)) {
      throw ConfigError("dimension '" + d.name + "' needs finite bounds with low < high");
    }
    if (d.kind == DimKind::kLogUniform && !(d.low > 0.0)) {
      throw ConfigError("log-uniform '" + d.name + "' needs low > 0");
    }
    if (d.kind == DimKind::kInteger && (d.low != std::floor(d.low) || d.high != std::floor(d.high))) {
      throw ConfigError("integer '" + d.name + "' needs integral bounds");
    }
  }
}

std::vector<double> HyperparamSpace::to_unit(const ConfigVector& c) const {
  if (c.size() != dims_.size()) throw UsageError("config has " + std::to_string(c.size()) + " values, space " +
                                                 std::to_string(dims_.size()));
  std::vector<double> u(c.size());
  for (size_t i = 0; i < c.size(); ++i) {
    const Dim& d = dims_[i];
    switch (d.kind) {
      case DimKind::kUniform:
        u[i] = (c[i] - d.low) / (d.high - d.low);
        break;
      case DimKind::kLogUniform:
        u[i] = (std::log(c[i]) - std::log(d.low)) / (std::log(d.high) - std::log(d.low));
        break;
      case DimKind::kInteger:
        u[i] = (c[i] - d.low + 0.5) / (d.high - d.low + 1.0);
        break;
      case DimKind::kCategorical:
        u[i] = (c[i] + 0.5) / static_cast<double>(d.categories.size());
        break;
    }
  }
  return u;
}

ConfigVector HyperparamSpace::from_unit(std::span<const double> u) const {
  if (u.size() != dims_.size()) throw UsageError("unit vector does not match the space");
  ConfigVector c(u.size());
  for (size_t i = 0; i < u.size(); ++i) {
    const Dim& d = dims_[i];
    const double x = std::clamp(u[i], 0.0, 1.0);
    switch (d.kind) {
      case DimKind::kUniform:
        c[i] = std::clamp(d.low + x * (d.high - d.low), d.low, d.high);
        break;
      case DimKind::kLogUniform:
        if (x == 0.0 || x == 1.0) {
          c[i] = x == 0.0 ? d.low : d.high;
          break;
        }
        c[i] = std::clamp(std::exp(std::log(d.low) + x * (std::log(d.high) - std::log(d.low))), d.low, d.high);
        break;
      case DimKind::kInteger: {
        const double span = d.high - d.low;
        c[i] = d.low + std::min(std::floor(x * (span + 1.0)), span);
        break;
      }
      case DimKind::kCategorical: {
        const double k = static_cast<double>(d.categories.size());
        c[i] = std::min(std::floor(x * k), k - 1.0);
        break;
      }
    }
  }
  return c;
}

ConfigVector HyperparamSpace::sample_uniform(Rng& rng) const {
  std::vector<double> u(dims_.size());
  for (double& x : u) x = rng.uniform();
  return from_unit(u);
}

bool HyperparamSpace::contains(const ConfigVector& c) const {
  if (c.size() != dims_.size()) return false;
  for (size_t i = 0; i < c.size(); ++i) {
    const Dim& d = dims_[i];
    if (!std::isfinite(c[i])) return false;
    if (d.categorical()) {
      if (c[i] != std::floor(c[i]) || c[i] < 0 || c[i] >= static_cast<double>(d.categories.size())) return false;
    } else {
      if (c[i] < d.low || c[i] > d.high) return false;
      if (d.kind == DimKind::kInteger && c[i] != std::floor(c[i])) return false;
    }
  }
  return true;
}

json HyperparamSpace::to_json() const {
  json dims = json::array();
  for (const Dim& d : dims_) {
    json j{{"name", d.name}, {"kind", dim_kind_name(d.kind)}};
    if (d.categorical()) {
      j["categories"] = d.categories;
    } else {
      j["low"] = d.low;
      j["high"] = d.high;
    }
    dims.push_back(std::move(j));
  }
  return {{"dims", dims}};
}

HyperparamSpace HyperparamSpace::from_json(const json& j) {
  std::vector<Dim> dims;
  try {
    for (const json& e : j.at("dims")) {
      for (const auto& [key, _] : e.items()) {
        if (key != "name" && key != "kind" && key != "low" && key != "high" && key != "categories") {
          throw ConfigError("unknown key '" + key + "' in space dimension");
        }
      }
      Dim d;
      d.name = e.at("name").get<std::string>();
      d.kind = dim_kind_from_name(e.at("kind").get<std::string>());
      if (d.categorical()) {
        d.categories = e.at("categories").get<std::vector<std::string>>();
      } else {
        d.low = e.at("low").get<double>();
        d.high = e.at("high").get<double>();
      }
      dims.push_back(std::move(d));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("space description: ") + e.what());
  }
  return HyperparamSpace(std::move(dims));
}

json HyperparamSpace::config_to_json(const ConfigVector& c) const {
  if (c.size() != dims_.size()) throw UsageError("config does not match the space");
  json j = json::object();
  for (size_t i = 0; i < c.size(); ++i) {
    const Dim& d = dims_[i];
    if (d.categorical()) {
      j[d.name] = d.categories.at(static_cast<size_t>(c[i]));
    } else if (d.kind == DimKind::kInteger) {
      j[d.name] = static_cast<long long>(c[i]);
    } else {
      j[d.name] = c[i];
    }
  }
  return j;
}

ConfigVector HyperparamSpace::config_from_json(const json& j) const {
  ConfigVector c(dims_.size());
  try {
    for (size_t i = 0; i < dims_.size(); ++i) {
      const Dim& d = dims_[i];
      const json& v = j.at(d.name);
      if (d.categorical()) {
        const auto it = std::find(d.categories.begin(), d.categories.end(), v.get<std::string>());
        if (it == d.categories.end()) throw ParseError("unknown category for '" + d.name + "'");
        c[i] = static_cast<double>(it - d.categories.begin());
      } else {
        c[i] = v.get<double>();
      }
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (!contains(c)) throw ParseError("config outside the search space: " + j.dump());
  return c;
}

HyperparamSpace load_space(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open space file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("space file " + path.string() + ": " + e.what());
  }
  return HyperparamSpace::from_json(j);
}

// ---------------------------------------------------------------------------
// Hyperband

int hyperband_s_max(double b_min, double b_max, double eta) {
  if (!(b_min > 0.0) || !std::isfinite(b_max) || b_max < b_min) {
    throw ConfigError("budgets need 0 < b_min <= b_max");
  }
  if (!(eta > 1.0) || !std::isfinite(eta)) throw ConfigError("eta must be > 1");
  const double levels = std::log(b_max / b_min) / std::log(eta);
  return static_cast<int>(std::floor(levels + 1e-3));
}

std::vector<Bracket> hyperband_brackets(double b_min, double b_max, double eta) {
  const int s_max = hyperband_s_max(b_min, b_max, eta);
  std::vector<Bracket> out;
  for (int s = s_max; s >= 0; --s) {
    Bracket b;
    b.s = s;
    b.n = static_cast<int>(std::ceil(static_cast<double>(s_max + 1) / (s + 1) * std::pow(eta, s) - 1e-9));
    b.initial_budget = b_max / std::pow(eta, s);
    out.push_back(b);
  }
  return out;
}

double bracket_cost(const Bracket& b, double eta) {
  double total = 0.0;
  long n = b.n;
  for (int r = 0; r <= b.s && n > 0; ++r) {
    total += static_cast<double>(n) * b.initial_budget * std::pow(eta, r);
    n = static_cast<long>(std::floor(static_cast<double>(n) / eta));
  }
  return total;
}

std::vector<Candidate> sh_round(std::vector<Candidate> candidates, double eta) {
  if (candidates.empty()) throw UsageError("SuccessiveHalving round without candidates");
  if (!(eta > 1.0)) throw ConfigError("eta must be > 1");
  for (Candidate& c : candidates) {
    if (std::isnan(c.loss)) c.loss = std::numeric_limits<double>::infinity();
  }
  const auto keep = static_cast<size_t>(std::floor(static_cast<double>(candidates.size()) / eta));
  std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    return a.loss != b.loss ? a.loss < b.loss : a.config_id < b.config_id;
  });
  candidates.resize(keep);
  return candidates;
}

// ---------------------------------------------------------------------------
// Trials

json trial_to_json(const TrialRecord& t, const HyperparamSpace& space) {
  json j{{"config_id", t.config_id},
         {"config", space.config_to_json(t.config)},
         {"budget", t.budget},
         {"loss", t.status == TrialStatus::kFinished ? json(t.loss) : json(nullptr)},
         {"wall_time", t.wall_time},
         {"status", t.status == TrialStatus::kFinished ? "finished" : "failed"},
         {"bracket", t.bracket},
         {"round", t.round},
         {"model_based", t.model_based},
         {"seed", t.seed}};
  if (!t.error.empty()) j["error"] = t.error;
  return j;
}

TrialRecord trial_from_json(const json& j, const HyperparamSpace& space) {
  TrialRecord t;
  try {
    t.config_id = j.at("config_id").get<long>();
    t.config = space.config_from_json(j.at("config"));
    t.budget = j.at("budget").get<double>();
    const std::string status = j.at("status").get<std::string>();
    if (status == "finished") {
      t.status = TrialStatus::kFinished;
      t.loss = j.at("loss").get<double>();
    } else if (status == "failed") {
      t.status = TrialStatus::kFailed;
      t.loss = std::numeric_limits<double>::infinity();
    } else {
      throw ParseError("unknown trial status '" + status + "'");
    }
    t.wall_time = j.at("wall_time").get<double>();
    t.bracket = j.at("bracket").get<int>();
    t.round = j.at("round").get<int>();
    t.model_based = j.at("model_based").get<bool>();
    t.seed = j.at("seed").get<uint64_t>();
    t.error = j.value("error", "");
  } catch (const json::exception& e) {
    throw ParseError(std::string("trial record: ") + e.what());
  }
  return t;
}

// ---------------------------------------------------------------------------
// Model

void KdeOptions::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("good fraction must lie in (0, 1)");
  if (!(random_fraction >= 0.0 && random_fraction <= 1.0)) throw ConfigError("random fraction must lie in [0, 1]");
  if (num_samples < 1) throw ConfigError("need at least one acquisition sample");
  if (!(bandwidth_factor > 0.0)) throw ConfigError("bandwidth factor must be positive");
  if (!(min_bandwidth > 0.0)) throw ConfigError("minimum bandwidth must be positive");
}

Kde::Kde(const HyperparamSpace& space, std::vector<std::vector<double>> points, double min_bandwidth)
    : points_(std::move(points)), min_bw_(min_bandwidth) {
  if (points_.empty()) throw UsageError("density needs at least one point");
  const size_t d = space.size();
  const double n = static_cast<double>(points_.size());
  const double scott = std::pow(n, -1.0 / (static_cast<double>(d) + 4.0));
  bw_.resize(d);
  cards_.resize(d, 0);
  for (size_t k = 0; k < d; ++k) {
    const Dim& dim = space.dims()[k];
    // Categories are measured by index, as with the normal-reference rule.
    const double scale = dim.categorical() ? static_cast<double>(dim.categories.size()) : 1.0;
    double mean = 0.0;
    for (const auto& p : points_) mean += p[k] * scale;
    mean /= n;
    double var = 0.0;
    for (const auto& p : points_) var += (p[k] * scale - mean) * (p[k] * scale - mean);
    const double sd = points_.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    double bw = std::max(sd * scott, min_bw_);
    if (dim.categorical()) {
      cards_[k] = static_cast<int>(dim.categories.size());
      const double cap = (cards_[k] - 1.0) / cards_[k];
      bw = std::min(bw, cap);
    }
    bw_[k] = bw;
  }
}

double Kde::pdf(std::span<const double> u) const {
  if (u.size() != bw_.size()) throw UsageError("density query has the wrong dimension");
  double total = 0.0;
  for (const auto& p : points_) {
    double prod = 1.0;
    for (size_t k = 0; k < u.size() && prod > 0.0; ++k) {
      if (cards_[k] > 0) {
        const int k_cat = cards_[k];
        const int a = std::min(static_cast<int>(u[k] * k_cat), k_cat - 1);
        const int b = std::min(static_cast<int>(p[k] * k_cat), k_cat - 1);
        const double mass = k_cat == 1 ? 1.0 : (a == b ? 1.0 - bw_[k] : bw_[k] / (k_cat - 1));
        prod *= mass * k_cat;  // density over the unit interval
      } else {
        const double h = bw_[k];
        const double z = (u[k] - p[k]) / h;
        const double norm = normal_cdf((1.0 - p[k]) / h) - normal_cdf(-p[k] / h);
        prod *= std::exp(-0.5 * z * z) / (h * std::sqrt(2.0 * std::numbers::pi) * norm);
      }
    }
    total += prod;
  }
  return total / static_cast<double>(points_.size());
}

std::vector<double> Kde::sample(Rng& rng, double widen) const {
  const auto& p = points_[rng.below(points_.size())];
  std::vector<double> u(p.size());
  for (size_t k = 0; k < p.size(); ++k) {
    if (cards_[k] > 0) {
      const int k_cat = cards_[k];
      int cat = std::min(static_cast<int>(p[k] * k_cat), k_cat - 1);
      const double lambda = std::min(bw_[k] * widen, (k_cat - 1.0) / k_cat);
      if (k_cat > 1 && rng.uniform() < lambda) {
        const int other = static_cast<int>(rng.below(static_cast<uint64_t>(k_cat - 1)));
        cat = other >= cat ? other + 1 : other;
      }
      u[k] = (cat + 0.5) / k_cat;
    } else {
      const double h = std::max(bw_[k] * widen, min_bw_);
      double x = p[k] + h * rng.normal();
      for (int tries = 0; (x < 0.0 || x > 1.0) && tries < 100; ++tries) x = p[k] + h * rng.normal();
      u[k] = std::clamp(x, 0.0, 1.0);
    }
  }
  return u;
}

double KdePair::ratio(std::span<const double> u) const {
  constexpr double kFloor = 1e-300;
  return std::max(good.pdf(u), kFloor) / std::max(bad.pdf(u), kFloor);
}

std::optional<KdePair> fit_kdes(std::span<const TrialRecord> history, double budget, const HyperparamSpace& space,
                                const KdeOptions& opt) {
  std::vector<const TrialRecord*> at;
  for (const TrialRecord& t : history) {
    if (t.budget == budget) at.push_back(&t);
  }
  const int n = static_cast<int>(at.size());
  if (n < opt.min_points(space.size())) return std::nullopt;
  auto loss_of = [](const TrialRecord* t) {
    return t->status == TrialStatus::kFinished ? t->loss : std::numeric_limits<double>::infinity();
  };
  std::sort(at.begin(), at.end(), [&](const TrialRecord* a, const TrialRecord* b) {
    const double la = loss_of(a);
    const double lb = loss_of(b);
    return la != lb ? la < lb : a->config_id < b->config_id;
  });
  int n_good = static_cast<int>(std::ceil(opt.gamma * n - 1e-12));
  n_good = std::clamp(n_good, 1, n - 1);
  std::vector<std::vector<double>> good;
  std::vector<std::vector<double>> bad;
  for (int i = 0; i < n; ++i) (i < n_good ? good : bad).push_back(space.to_unit(at[i]->config));
  KdePair pair;
  pair.budget = budget;
  pair.good = Kde(space, std::move(good), opt.min_bandwidth);
  pair.bad = Kde(space, std::move(bad), opt.min_bandwidth);
  return pair;
}

SampledConfig sample_config(std::span<const TrialRecord> history, std::span<const double> budgets,
                            const HyperparamSpace& space, const KdeOptions& opt, Rng& rng) {
  const bool random = rng.uniform() < opt.random_fraction;
  if (!random && !history.empty()) {
    std::vector<double> sorted(budgets.begin(), budgets.end());
    std::sort(sorted.rbegin(), sorted.rend());
    for (double b : sorted) {
      const auto model = fit_kdes(history, b, space, opt);
      if (!model) continue;
      std::vector<double> best;
      double best_ratio = -1.0;
      for (int i = 0; i < opt.num_samples; ++i) {
        std::vector<double> u = model->good.sample(rng, opt.bandwidth_factor);
        const double r = model->ratio(u);
        if (r > best_ratio) {
          best_ratio = r;
          best = std::move(u);
        }
      }
      return {space.from_unit(best), true};
    }
  }
  return {space.sample_uniform(rng), false};
}

// ---------------------------------------------------------------------------
// Worker protocol

std::string frame_message(const json& msg) {
  const std::string body = msg.dump();
  if (body.size() > 0xffffffffULL) throw UsageError("message too large to frame");
  const auto n = static_cast<uint32_t>(body.size());
  std::string out;
  out.reserve(4 + body.size());
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((n >> shift) & 0xff));
  out += body;
  return out;
}

std::optional<json> read_message(std::istream& in) {
  unsigned char len[4];
  in.read(reinterpret_cast<char*>(len), 4);
  if (in.gcount() == 0 && in.eof()) return std::nullopt;
  if (in.gcount() != 4) throw ParseError("truncated message length");
  const uint32_t n = (uint32_t{len[0]} << 24) | (uint32_t{len[1]} << 16) | (uint32_t{len[2]} << 8) | uint32_t{len[3]};
  std::string body(n, '\0');
  in.read(body.data(), n);
  if (static_cast<uint32_t>(in.gcount()) != n) throw ParseError("truncated message body");
  try {
    return json::parse(body);
  } catch (const json::exception& e) {
    throw ParseError(std::string("message is not JSON: ") + e.what());
  }
}

namespace {

json eval_message(long config_id, const ConfigVector& c, double budget, uint64_t seed, const HyperparamSpace& space) {
  return {{"eval", {{"config_id", config_id}, {"config", space.config_to_json(c)}, {"budget", budget}, {"seed", seed}}}};
}

// Evaluates one "eval" message and builds the "result" reply.
json answer(const json& msg, const HyperparamSpace& space, const Objective& f) {
  const json& e = msg.at("eval");
  const long id = e.at("config_id").get<long>();
  json r{{"config_id", id}};
  try {
    const double loss = f(space.config_from_json(e.at("config")), e.at("budget").get<double>(),
                          e.at("seed").get<uint64_t>());
    if (std::isfinite(loss)) {
      r["loss"] = loss;
      r["status"] = "finished";
    } else {
      r["loss"] = nullptr;
      r["status"] = "failed";
      r["error"] = "non-finite loss";
    }
  } catch (const std::exception& ex) {
    r["loss"] = nullptr;
    r["status"] = "failed";
    r["error"] = ex.what();
  }
  return {{"result", r}};
}

}  // namespace

void serve_worker(std::istream& in, std::ostream& out, const HyperparamSpace& space, const Objective& f) {
  while (auto msg = read_message(in)) {
    if (!msg->contains("eval")) throw ParseError("worker expected an eval message");
    out << frame_message(answer(*msg, space, f));
    out.flush();
  }
}

// ---------------------------------------------------------------------------
// Optimizer

void BohbOptions::validate() const {
  hyperband_s_max(b_min, b_max, eta);
  if (n_iterations < 0) throw ConfigError("iteration count must be non-negative");
  if (workers < 1) throw ConfigError("need at least one worker");
  if (synchronous && workers != 1) throw ConfigError("synchronous mode runs a single worker");
  if (!(max_total_budget >= 0.0)) throw ConfigError("budget cap must be non-negative");
  kde.validate();
}

namespace {

template <typename T>
class Channel {
 public:
  void push(T v) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      q_.push_back(std::move(v));
    }
    cv_.notify_one();
  }
  void close() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }
  std::optional<T> pop() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return closed_ || !q_.empty(); });
    if (q_.empty()) return std::nullopt;
    T v = std::move(q_.front());
    q_.pop_front();
    return v;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> q_;
  bool closed_ = false;
};

struct Job {
  int run = 0;
  int round = 0;
  long config_id = 0;
  double budget = 0.0;
  uint64_t seed = 0;
  bool model_based = false;
};

struct ShRun {
  int index = 0;
  Bracket bracket;
  int round = 0;
  int to_sample = 0;       // first-round configs not drawn yet
  std::deque<long> ready;  // promoted configs awaiting dispatch
  int outstanding = 0;     // dispatched in this round, no result yet
  int round_size = 0;
  std::vector<Candidate> results;
};

class Scheduler {
 public:
  Scheduler(const Objective& f, const HyperparamSpace& space, const BohbOptions& opt, std::ostream* log)
      : f_(f), space_(space), opt_(opt), log_(log), rng_(derive_seed(opt.seed, 0xb0)) {
    brackets_ = hyperband_brackets(opt.b_min, opt.b_max, opt.eta);
    for (const Bracket& b : brackets_) budgets_.push_back(b.initial_budget);
  }

  BohbResult run() {
    if (log_) *log_ << trial_log_header(space_, opt_).dump() << '\n';
    start_ = std::chrono::steady_clock::now();
    std::vector<std::thread> threads;
    if (!opt_.synchronous) {
      for (int i = 0; i < opt_.workers; ++i) threads.emplace_back([this] { worker_loop(); });
    }
    try {
      loop();
    } catch (...) {
      jobs_.close();
      for (auto& t : threads) t.join();
      throw;
    }
    jobs_.close();
    for (auto& t : threads) t.join();
    return std::move(result_);
  }

 private:
  void worker_loop() {
    while (auto bytes = jobs_.pop()) {
      std::istringstream in(*bytes);
      const auto msg = read_message(in);
      results_.push(frame_message(answer(*msg, space_, f_)));
    }
  }

  std::optional<Job> next_job() {
    for (ShRun& r : runs_) {
      if (auto j = job_from(r)) return j;
    }
    if (started_ < opt_.n_iterations && !capped_) {
      ShRun r;
      r.index = started_;
      r.bracket = brackets_[static_cast<size_t>(started_) % brackets_.size()];
      r.to_sample = r.bracket.n;
      r.round_size = r.bracket.n;
      ++started_;
      runs_.push_back(std::move(r));
      return job_from(runs_.back());
    }
    return std::nullopt;
  }

  double round_budget(const ShRun& r) const { return opt_.b_max / std::pow(opt_.eta, r.bracket.s - r.round); }

  std::optional<Job> job_from(ShRun& r) {
    Job j;
    j.run = r.index;
    j.round = r.round;
    j.budget = round_budget(r);
    if (r.round == 0 && r.to_sample > 0) {
      const SampledConfig s = sample_config(result_.trials, budgets_, space_, opt_.kde, rng_);
      j.config_id = next_id_++;
      configs_[j.config_id] = s.config;
      j.model_based = s.model_based;
      --r.to_sample;
    } else if (!r.ready.empty()) {
      j.config_id = r.ready.front();
      r.ready.pop_front();
    } else {
      return std::nullopt;
    }
    j.seed = derive_seed(derive_seed(opt_.seed, static_cast<uint64_t>(j.config_id)), static_cast<uint64_t>(j.round));
    ++r.outstanding;
    return j;
  }

  void loop() {
    int in_flight = 0;
    double committed = 0.0;  // consumed plus in flight
    for (;;) {
      while (in_flight < opt_.workers) {
        if (capped_ && !has_ready()) break;
        std::optional<Job> j = peek_fits(committed);
        if (!j) break;
        committed += j->budget;
        const std::string bytes = frame_message(eval_message(j->config_id, configs_.at(j->config_id), j->budget,
                                                             j->seed, space_));
        pending_[j->config_id] = *j;
        ++in_flight;
        if (opt_.synchronous) {
          std::istringstream in(bytes);
          results_.push(frame_message(answer(*read_message(in), space_, f_)));
        } else {
          jobs_.push(bytes);
        }
      }
      if (in_flight == 0) break;
      const auto bytes = results_.pop();
      std::istringstream in(*bytes);
      const json msg = *read_message(in);
      --in_flight;
      complete(msg.at("result"));
    }
  }

  bool has_ready() const {
    return std::any_of(runs_.begin(), runs_.end(), [](const ShRun& r) { return !r.ready.empty(); });
  }

  // Next job if it fits under the budget cap. A job that does not fit stops
  // all further dispatch.
  std::optional<Job> peek_fits(double committed) {
    if (capped_) return std::nullopt;
    if (opt_.max_total_budget > 0.0) {
      const std::optional<double> b = next_budget();
      if (!b) return std::nullopt;
      if (committed + *b > opt_.max_total_budget * (1.0 + 1e-12)) {
        capped_ = true;
        return std::nullopt;
      }
    }
    return next_job();
  }

  // Budget of the job next_job() would return, without side effects.
  std::optional<double> next_budget() const {
    for (const ShRun& r : runs_) {
      if ((r.round == 0 && r.to_sample > 0) || !r.ready.empty()) return round_budget(r);
    }
    if (started_ < opt_.n_iterations) {
      const Bracket& b = brackets_[static_cast<size_t>(started_) % brackets_.size()];
      return b.initial_budget;
    }
    return std::nullopt;
  }

  void complete(const json& r) {
    const long id = r.at("config_id").get<long>();
    const auto it = pending_.find(id);
    if (it == pending_.end()) throw EvaluationError("result for unknown config " + std::to_string(id));
    const Job job = it->second;
    pending_.erase(it);

    TrialRecord t;
    t.config_id = id;
    t.config = configs_.at(id);
    t.budget = job.budget;
    t.bracket = job.run;
    t.round = job.round;
    t.model_based = job.model_based;
    t.seed = job.seed;
    if (r.at("status") == "finished") {
      t.loss = r.at("loss").get<double>();
    } else {
      t.status = TrialStatus::kFailed;
      t.loss = std::numeric_limits<double>::infinity();
      t.error = r.value("error", "");
    }
    result_.total_budget += t.budget;
    t.wall_time = opt_.synchronous
                      ? result_.total_budget
                      : std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (log_) {
      *log_ << trial_to_json(t, space_).dump() << '\n';
      log_->flush();
    }
    if (t.status == TrialStatus::kFinished && t.budget == opt_.b_max &&
        (!result_.incumbent || t.loss < result_.incumbent->loss ||
         (t.loss == result_.incumbent->loss && t.config_id < result_.incumbent->config_id))) {
      result_.incumbent = t;
    }
    result_.trials.push_back(t);

    auto run = std::find_if(runs_.begin(), runs_.end(), [&](const ShRun& s) { return s.index == job.run; });
    run->results.push_back({id, t.loss});
    --run->outstanding;
    if (static_cast<int>(run->results.size()) < run->round_size) return;
    // Round complete: promote, or retire the run.
    std::vector<Candidate> keep;
    if (run->round < run->bracket.s) keep = sh_round(run->results, opt_.eta);
    if (keep.empty()) {
      runs_.erase(run);
      return;
    }
    ++run->round;
    run->results.clear();
    run->round_size = static_cast<int>(keep.size());
    for (const Candidate& c : keep) run->ready.push_back(c.config_id);
  }

  const Objective& f_;
  const HyperparamSpace& space_;
  BohbOptions opt_;
  std::ostream* log_;
  Rng rng_;
  std::vector<Bracket> brackets_;
  std::vector<double> budgets_;
  std::deque<ShRun> runs_;
  std::map<long, ConfigVector> configs_;
  std::map<long, Job> pending_;
  long next_id_ = 0;
  int started_ = 0;
  bool capped_ = false;
  BohbResult result_;
  Channel<std::string> jobs_;
  Channel<std::string> results_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

BohbResult run_bohb(const Objective& f, const HyperparamSpace& space, const BohbOptions& opt, std::ostream* log) {
  opt.validate();
  if (!f) throw ConfigError("objective is empty");
  Scheduler s(f, space, opt, log);
  return s.run();
}

json trial_log_header(const HyperparamSpace& space, const BohbOptions& opt) {
  json h = {{"schema", kTrialLogSchema},
            {"version", kTrialLogVersion},
            {"space", space.to_json()},
            {"b_min", opt.b_min},
            {"b_max", opt.b_max},
            {"eta", opt.eta},
            {"n_iterations", opt.n_iterations},
            {"workers", opt.workers},
            {"synchronous", opt.synchronous},
            {"max_total_budget", opt.max_total_budget},
            {"seed", opt.seed}};
  if (!opt.metadata.is_null()) h["metadata"] = opt.metadata;
  return h;
}

TrialLog read_trial_log(std::istream& in) {
  TrialLog log;
  std::string line;
  if (!std::getline(in, line)) throw ParseError("trial log is empty");
  try {
    log.header = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(std::string("trial log header: ") + e.what());
  }
  if (log.header.value("schema", "") != kTrialLogSchema) throw ParseError("not a trial log");
  if (log.header.value("version", -1) != kTrialLogVersion) {
    throw MigrationError("trial log version " + log.header.value("version", json(-1)).dump() + ", expected " +
                         std::to_string(kTrialLogVersion));
  }
  log.space = HyperparamSpace::from_json(log.header.at("space"));
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError("trial log line " + std::to_string(lineno) + ": " + e.what());
    }
    log.trials.push_back(trial_from_json(j, log.space));
  }
  return log;
}

TrialLog read_trial_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trial log " + path.string());
  return read_trial_log(in);
}

std::vector<Trajectory> incumbent_trajectory(std::span<const TrialRecord> trials) {
  std::vector<const TrialRecord*> done;
  for (const TrialRecord& t : trials) {
    if (t.status == TrialStatus::kFinished) done.push_back(&t);
  }
  std::stable_sort(done.begin(), done.end(), [](const TrialRecord* a, const TrialRecord* b) {
    return a->wall_time != b->wall_time ? a->wall_time < b->wall_time : a->config_id < b->config_id;
  });
  std::map<double, Trajectory> by_budget;
  for (const TrialRecord* t : done) {
    Trajectory& tr = by_budget[t->budget];
    tr.budget = t->budget;
    const double best = tr.points.empty() ? t->loss : std::min(tr.points.back().second, t->loss);
    tr.points.emplace_back(t->wall_time, best);
  }
  std::vector<Trajectory> out;
  for (auto& [b, tr] : by_budget) out.push_back(std::move(tr));
  return out;
}

HyperparamSpace SyntheticQuadratic::space() {
  return HyperparamSpace({{"x", DimKind::kUniform, 0.0, 1.0, {}}, {"y", DimKind::kUniform, 0.0, 1.0, {}}});
}

double SyntheticQuadratic::operator()(const ConfigVector& c, double budget, uint64_t seed) const {
  if (c.size() != 2) throw UsageError("synthetic objective takes two values");
  Rng rng(derive_seed(seed, 0x5eed));
  const double dx = c[0] - cx;
  const double dy = c[1] - cy;
  const double sd = noise * std::sqrt(std::max(0.0, 1.0 - budget / b_max));
  return dx * dx + dy * dy + sd * rng.normal();
}

}  // namespace cellsearch
