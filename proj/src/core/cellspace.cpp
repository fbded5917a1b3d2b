#include "cellspace.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

namespace cellsearch {

using nlohmann::json;

std::string_view cell_kind_name(CellKind kind) {
  switch (kind) {
    case CellKind::kNormal: return "normal";
    case CellKind::kReduction: return "reduction";
    case CellKind::kUpsampling: return "upsampling";
  }
  return "?";
}

CellKind cell_kind_from_name(std::string_view name) {
  for (CellKind k : kAllCellKinds) {
    if (cell_kind_name(k) == name) return k;
  }
  throw ParseError("unknown cell kind '" + std::string(name) + "'");
}

std::vector<CellEdge> CellTemplate::edges() const {
  std::vector<CellEdge> out;
  for (int j = arity(); j < num_nodes(); ++j) {
    for (int i = 0; i < j; ++i) out.push_back({i, j});
  }
  return out;
}

int CellTemplate::num_edges() const {
  const int a = arity();
  // sum_{m=0}^{n-1} (a + m)
  return num_intermediate * a + num_intermediate * (num_intermediate - 1) / 2;
}

int CellTemplate::edge_index(int src, int dst) const {
  const int a = arity();
  if (dst < a || dst >= num_nodes() || src < 0 || src >= dst) {
    throw ConfigError("no edge (" + std::to_string(src) + ", " + std::to_string(dst) + ") in " +
                      std::string(cell_kind_name(kind)) + " cell");
  }
  const int m = dst - a;
  return m * a + m * (m - 1) / 2 + src;
}

// ---------------------------------------------------------------------------
// AlphaSet

AlphaSet::AlphaSet(int num_intermediate, double temperature) : num_intermediate_(num_intermediate) {
  if (num_intermediate < 1) throw ConfigError("cells need at least one intermediate node");
  set_temperature(temperature);
  for (CellKind k : kAllCellKinds) {
    const int e = cell_template(k).num_edges();
    auto& v = alphas_[static_cast<int>(k)];
    for (int i = 0; i < e; ++i) v.push_back(Tensor::zeros({1, 1, 1, kNumCandidateOps}).set_requires_grad(true));
  }
}

void AlphaSet::set_temperature(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("softmax temperature must be positive and finite");
  temperature_ = tau;
}

std::vector<double> AlphaSet::weights(CellKind kind, int edge_index) const {
  return softmax_vec(edge(kind, edge_index).values(), temperature_);
}

std::vector<Tensor> AlphaSet::parameters() const {
  std::vector<Tensor> out;
  for (const auto& v : alphas_) out.insert(out.end(), v.begin(), v.end());
  return out;
}

AlphaSet AlphaSet::clone() const {
  AlphaSet a;
  a.num_intermediate_ = num_intermediate_;
  a.temperature_ = temperature_;
  for (int k = 0; k < 3; ++k) {
    for (const auto& t : alphas_[k]) a.alphas_[k].push_back(t.clone().set_requires_grad(true));
  }
  return a;
}

void AlphaSet::add_constant(double c) {
  for (auto& v : alphas_) {
    for (auto& t : v) {
      for (double& x : t.values_mut()) x += c;
    }
  }
}

json AlphaSet::to_json() const {
  json j;
  j["version"] = 1;
  j["num_intermediate"] = num_intermediate_;
  j["temperature"] = temperature_;
  j["ops"] = json::array();
  for (CandidateOpKind o : kAllCandidateOps) j["ops"].push_back(op_name(o));
  for (CellKind k : kAllCellKinds) {
    json edges = json::array();
    const auto tmpl = cell_template(k);
    const auto list = tmpl.edges();
    for (size_t e = 0; e < list.size(); ++e) {
      const auto v = edge(k, static_cast<int>(e)).values();
      edges.push_back({{"src", list[e].src}, {"dst", list[e].dst}, {"alpha", std::vector<double>(v.begin(), v.end())}});
    }
    j["alphas"][std::string(cell_kind_name(k))] = edges;
  }
  return j;
}

AlphaSet AlphaSet::from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw ParseError("alphas: unsupported version");
    AlphaSet a(j.at("num_intermediate").get<int>(), j.at("temperature").get<double>());
    for (CellKind k : kAllCellKinds) {
      const auto& edges = j.at("alphas").at(std::string(cell_kind_name(k)));
      const int n = a.cell_template(k).num_edges();
      if (static_cast<int>(edges.size()) != n) {
        throw ParseError("alphas/" + std::string(cell_kind_name(k)) + ": expected " + std::to_string(n) + " edges");
      }
      for (int e = 0; e < n; ++e) {
        auto v = edges[e].at("alpha").get<std::vector<double>>();
        if (v.size() != static_cast<size_t>(kNumCandidateOps)) throw ParseError("alphas: edge vector must have 8 entries");
        a.edge(k, e) = Tensor({1, 1, 1, kNumCandidateOps}, std::move(v)).set_requires_grad(true);
      }
    }
    return a;
  } catch (const json::exception& e) {
    throw ParseError(std::string("alphas: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Genotype

const CellGenotype& Genotype::cell(CellKind kind) const {
  auto it = cells.find(kind);
  if (it == cells.end()) throw ConfigError("genotype has no " + std::string(cell_kind_name(kind)) + " cell");
  return it->second;
}

void Genotype::validate() const {
  for (CellKind k : kAllCellKinds) {
    const CellGenotype& c = cell(k);
    const CellTemplate tmpl{k, num_intermediate};
    const std::string where = std::string(cell_kind_name(k)) + " cell";
    if (static_cast<int>(c.nodes.size()) != num_intermediate) {
      throw ConfigError(where + ": " + std::to_string(c.nodes.size()) + " nodes, expected " +
                        std::to_string(num_intermediate));
    }
    for (int m = 0; m < num_intermediate; ++m) {
      const auto& node = c.nodes[m];
      if (static_cast<int>(node.size()) != edges_per_node) {
        throw ConfigError(where + " node " + std::to_string(m) + ": " + std::to_string(node.size()) +
                          " edges, expected " + std::to_string(edges_per_node));
      }
      std::set<int> seen;
      for (const auto& e : node) {
        if (e.op == CandidateOpKind::kZero) throw ConfigError(where + ": zero operation in genotype");
        if (e.src < 0 || e.src >= tmpl.arity() + m) {
          throw ConfigError(where + " node " + std::to_string(m) + ": source " + std::to_string(e.src) +
                            " does not precede the node");
        }
        if (!seen.insert(e.src).second) throw ConfigError(where + ": duplicate source " + std::to_string(e.src));
      }
    }
  }
}

namespace {

json cells_json(const Genotype& g) {
  json cells = json::object();
  for (const auto& [kind, cell] : g.cells) {
    json nodes = json::array();
    for (const auto& node : cell.nodes) {
      json edges = json::array();
      for (const auto& e : node) edges.push_back({{"src", e.src}, {"op", op_name(e.op)}});
      nodes.push_back(edges);
    }
    cells[std::string(cell_kind_name(kind))] = {{"nodes", nodes}};
  }
  return cells;
}

}  // namespace

std::string Genotype::hash() const {
  const std::string s = cells_json(*this).dump();
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string genotype_to_json(const Genotype& g) {
  json j;
  j["version"] = 1;
  j["num_intermediate"] = g.num_intermediate;
  j["edges_per_node"] = g.edges_per_node;
  j["cells"] = cells_json(g);
  j["meta"] = g.meta;
  return j.dump(2);
}

Genotype genotype_from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("genotype: malformed JSON at byte ") + std::to_string(e.byte) + ": " + e.what());
  }
  auto require = [](const json& obj, const char* key, const std::string& path) -> const json& {
    if (!obj.is_object() || !obj.contains(key)) throw ParseError("genotype: missing '" + std::string(key) + "' at " + path);
    return obj.at(key);
  };
  try {
    Genotype g;
    const int version = require(j, "version", "/").get<int>();
    if (version != 1) throw ParseError("genotype: unsupported version " + std::to_string(version) + " at /version");
    g.num_intermediate = j.value("num_intermediate", 3);
    g.edges_per_node = j.value("edges_per_node", 2);
    const json& cells = require(j, "cells", "/");
    for (CellKind k : kAllCellKinds) {
      const std::string name(cell_kind_name(k));
      const json& cell = require(cells, name.c_str(), "/cells");
      const json& nodes = require(cell, "nodes", "/cells/" + name);
      if (!nodes.is_array()) throw ParseError("genotype: /cells/" + name + "/nodes must be an array");
      CellGenotype cg;
      for (size_t m = 0; m < nodes.size(); ++m) {
        const std::string npath = "/cells/" + name + "/nodes/" + std::to_string(m);
        if (!nodes[m].is_array()) throw ParseError("genotype: " + npath + " must be an array");
        std::vector<GenotypeEdge> edges;
        for (size_t e = 0; e < nodes[m].size(); ++e) {
          const std::string epath = npath + "/" + std::to_string(e);
          const json& edge = nodes[m][e];
          GenotypeEdge ge;
          ge.src = require(edge, "src", epath).get<int>();
          const std::string op = require(edge, "op", epath).get<std::string>();
          try {
            ge.op = op_from_name(op);
          } catch (const ParseError&) {
            throw ParseError("genotype: unknown operation '" + op + "' at " + epath + "/op");
          }
          edges.push_back(ge);
        }
        cg.nodes.push_back(std::move(edges));
      }
      g.cells[k] = std::move(cg);
    }
    for (auto it = cells.begin(); it != cells.end(); ++it) {
      try {
        cell_kind_from_name(it.key());
      } catch (const ParseError&) {
        throw ParseError("genotype: unknown cell kind '" + it.key() + "' at /cells");
      }
    }
    if (j.contains("meta")) g.meta = j.at("meta");
    try {
      g.validate();
    } catch (const ConfigError& e) {
      throw ParseError(std::string("genotype: ") + e.what());
    }
    return g;
  } catch (const json::exception& e) {
    throw ParseError(std::string("genotype: ") + e.what());
  }
}

double edge_strength(std::span<const double> weights) {
  double best = 0.0;
  for (size_t o = 0; o < weights.size(); ++o) {
    if (static_cast<int>(o) == op_index(CandidateOpKind::kZero)) continue;
    best = std::max(best, weights[o]);
  }
  return best;
}

double edge_strength(const AlphaSet& alphas, CellKind kind, int edge_index) {
  return edge_strength(alphas.weights(kind, edge_index));
}

Genotype discretize(const AlphaSet& alphas, int k) {
  Genotype g;
  g.num_intermediate = alphas.num_intermediate();
  g.edges_per_node = k;
  for (CellKind kind : kAllCellKinds) {
    const CellTemplate tmpl = alphas.cell_template(kind);
    CellGenotype cg;
    for (int j = tmpl.arity(); j < tmpl.num_nodes(); ++j) {
      if (j < k) throw ConfigError("discretize: node has fewer than k candidate predecessors");
      struct Candidate {
        int src;
        double strength;
        int op;
      };
      std::vector<Candidate> cands;
      for (int i = 0; i < j; ++i) {
        const auto w = alphas.weights(kind, tmpl.edge_index(i, j));
        int best_op = -1;
        for (int o = 0; o < kNumCandidateOps; ++o) {
          if (o == op_index(CandidateOpKind::kZero)) continue;
          if (best_op < 0 || w[o] > w[best_op]) best_op = o;
        }
        cands.push_back({i, w[best_op], best_op});
      }
      std::stable_sort(cands.begin(), cands.end(),
                       [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
      std::vector<GenotypeEdge> kept;
      for (int e = 0; e < k; ++e) kept.push_back({cands[e].src, static_cast<CandidateOpKind>(cands[e].op)});
      std::sort(kept.begin(), kept.end(), [](const GenotypeEdge& a, const GenotypeEdge& b) { return a.src < b.src; });
      cg.nodes.push_back(std::move(kept));
    }
    g.cells[kind] = std::move(cg);
  }
  return g;
}

Genotype sample_random_genotype(int num_intermediate, uint64_t seed, int k) {
  Rng rng(seed);
  Genotype g;
  g.num_intermediate = num_intermediate;
  g.edges_per_node = k;
  g.meta = {{"source", "random"}, {"seed", seed}};
  for (CellKind kind : kAllCellKinds) {
    const CellTemplate tmpl{kind, num_intermediate};
    CellGenotype cg;
    for (int j = tmpl.arity(); j < tmpl.num_nodes(); ++j) {
      std::vector<int> srcs(j);
      std::iota(srcs.begin(), srcs.end(), 0);
      // Partial Fisher-Yates: the first k entries are a uniform k-subset.
      for (int e = 0; e < k; ++e) {
        const int pick = e + static_cast<int>(rng.below(static_cast<uint64_t>(j - e)));
        std::swap(srcs[e], srcs[pick]);
      }
      std::vector<GenotypeEdge> kept;
      for (int e = 0; e < k; ++e) {
        const auto op = static_cast<CandidateOpKind>(1 + rng.below(kNumCandidateOps - 1));
        kept.push_back({srcs[e], op});
      }
      std::sort(kept.begin(), kept.end(), [](const GenotypeEdge& a, const GenotypeEdge& b) { return a.src < b.src; });
      cg.nodes.push_back(std::move(kept));
    }
    g.cells[kind] = std::move(cg);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Cells with weights

InputAdapter make_adapter(int in_channels, int out_channels, int in_res, int out_res, bool bilinear, Rng& rng) {
  InputAdapter a;
  auto init = [&](Shape s, int fan_in) { return Tensor::randn(s, rng, std::sqrt(2.0 / fan_in)).set_requires_grad(true); };
  if (in_res == out_res) {
    if (in_channels == out_channels && !bilinear) return a;
    a.kind = InputAdapter::Kind::kConv;
    a.scale = 1;
    a.weight = init({out_channels, in_channels, 1, 1}, in_channels);
  } else if (in_res < out_res) {
    if (out_res % in_res != 0) throw ConfigError("adapter: non-integral downsampling");
    a.kind = InputAdapter::Kind::kConv;
    a.scale = out_res / in_res;
    a.weight = init({out_channels, in_channels, 1, 1}, in_channels);
  } else {
    if (in_res % out_res != 0) throw ConfigError("adapter: non-integral upsampling");
    a.scale = in_res / out_res;
    if (bilinear) {
      a.kind = InputAdapter::Kind::kBilinearConv;
      a.weight = init({out_channels, in_channels, 1, 1}, in_channels);
    } else {
      a.kind = InputAdapter::Kind::kTransposed;
      const int k = 2 * a.scale;
      a.weight = init({out_channels, in_channels, k, k}, in_channels * k * k / (a.scale * a.scale));
    }
  }
  return a;
}

Tensor apply_adapter(const InputAdapter& a, const Tensor& x) {
  const int in_c = x.shape().c;
  switch (a.kind) {
    case InputAdapter::Kind::kIdentity: return x;
    case InputAdapter::Kind::kConv:
      return conv2d(relu(x), make_conv_spec(in_c, a.weight.shape().n, 1, a.scale), a.weight);
    case InputAdapter::Kind::kTransposed: {
      ConvSpec s = make_conv_spec(in_c, a.weight.shape().n, 2 * a.scale, a.scale, a.scale / 2);
      return transposed_conv2d(relu(x), s, a.weight);
    }
    case InputAdapter::Kind::kBilinearConv:
      return conv2d(bilinear_resize(x, a.scale), make_conv_spec(in_c, a.weight.shape().n, 1), a.weight);
  }
  throw ConfigError("unknown adapter");
}

std::vector<Tensor> Cell::parameters() const {
  std::vector<Tensor> out;
  for (const auto& a : adapters) {
    if (a.weight.defined()) out.push_back(a.weight);
  }
  for (const auto& e : edges) {
    for (const auto& op : e.ops) out.insert(out.end(), op.weights.begin(), op.weights.end());
  }
  return out;
}

namespace {

std::vector<InputAdapter> make_adapters(CellKind kind, int channels, std::span<const CellInputSpec> inputs,
                                        int out_divisor, Rng& rng) {
  const CellTemplate tmpl{kind, 1};
  if (static_cast<int>(inputs.size()) != tmpl.arity()) {
    throw ConfigError(std::string(cell_kind_name(kind)) + " cell takes " + std::to_string(tmpl.arity()) +
                      " inputs, got " + std::to_string(inputs.size()));
  }
  const int node_res = kind == CellKind::kReduction ? out_divisor / 2 : out_divisor;
  if (node_res < 1) throw ConfigError("reduction cell cannot reach output divisor " + std::to_string(out_divisor));
  std::vector<InputAdapter> adapters;
  for (size_t i = 0; i < inputs.size(); ++i) {
    const bool bilinear = kind == CellKind::kUpsampling && i == 2;
    adapters.push_back(
        make_adapter(inputs[i].channels, channels, inputs[i].resolution_divisor, node_res, bilinear, rng));
  }
  return adapters;
}

}  // namespace

Cell make_mixed_cell(CellKind kind, int num_intermediate, int channels, std::span<const CellInputSpec> inputs,
                     int out_divisor, Rng& rng, bool affine) {
  Cell cell;
  cell.tmpl = {kind, num_intermediate};
  cell.channels = channels;
  cell.mixed = true;
  cell.adapters = make_adapters(kind, channels, inputs, out_divisor, rng);
  for (const CellEdge& e : cell.tmpl.edges()) {
    EdgeOps eo{e, {}};
    for (CandidateOpKind k : kAllCandidateOps) eo.ops.push_back(make_op(k, channels, cell.tmpl.edge_stride(e.src), rng, affine));
    cell.edges.push_back(std::move(eo));
  }
  return cell;
}

Cell make_discrete_cell(const Genotype& genotype, CellKind kind, int channels, std::span<const CellInputSpec> inputs,
                        int out_divisor, Rng& rng, bool affine) {
  genotype.validate();
  Cell cell;
  cell.tmpl = {kind, genotype.num_intermediate};
  cell.channels = channels;
  cell.mixed = false;
  cell.adapters = make_adapters(kind, channels, inputs, out_divisor, rng);
  const CellGenotype& cg = genotype.cell(kind);
  for (int m = 0; m < genotype.num_intermediate; ++m) {
    const int dst = cell.tmpl.arity() + m;
    for (const GenotypeEdge& ge : cg.nodes[m]) {
      EdgeOps eo{{ge.src, dst}, {make_op(ge.op, channels, cell.tmpl.edge_stride(ge.src), rng, affine)}};
      cell.edges.push_back(std::move(eo));
    }
  }
  return cell;
}

Tensor mixed_op_forward(const EdgeOps& edge, const Tensor& x, const Tensor& alpha, double temperature) {
  if (edge.ops.size() != static_cast<size_t>(kNumCandidateOps)) {
    throw ConfigError("mixed op on edge (" + std::to_string(edge.edge.src) + ", " + std::to_string(edge.edge.dst) +
                      ") is missing candidate instances");
  }
  std::vector<Tensor> outs;
  outs.reserve(edge.ops.size());
  for (size_t o = 0; o < edge.ops.size(); ++o) {
    if (edge.ops[o].kind != kAllCandidateOps[o]) throw ConfigError("mixed op bank out of order");
    outs.push_back(apply_candidate(edge.ops[o], x));
  }
  return weighted_sum(outs, softmax(alpha, temperature));
}

Tensor cell_forward(const Cell& cell, std::span<const Tensor> inputs, const AlphaSet* alphas) {
  const CellTemplate& t = cell.tmpl;
  if (static_cast<int>(inputs.size()) != t.arity()) {
    throw ShapeError(std::string(cell_kind_name(t.kind)) + " cell: expected " + std::to_string(t.arity()) +
                     " inputs, got " + std::to_string(inputs.size()));
  }
  if (cell.mixed && !alphas) throw ConfigError("mixed cell requires architecture parameters");
  std::vector<Tensor> nodes;
  nodes.reserve(t.num_nodes());
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tensor a = apply_adapter(cell.adapters[i], inputs[i]);
    if (a.shape().c != cell.channels) {
      throw ShapeError("cell input " + std::to_string(i) + " adapts to " + a.shape().str() + ", expected " +
                       std::to_string(cell.channels) + " channels");
    }
    if (!nodes.empty() && !a.shape().same_spatial(nodes.front().shape())) {
      throw ShapeError("cell input " + std::to_string(i) + " has spatial " + a.shape().str() + " vs " +
                       nodes.front().shape().str());
    }
    nodes.push_back(std::move(a));
  }
  for (int j = t.arity(); j < t.num_nodes(); ++j) {
    std::vector<Tensor> terms;
    for (const EdgeOps& e : cell.edges) {
      if (e.edge.dst != j) continue;
      if (cell.mixed) {
        terms.push_back(mixed_op_forward(e, nodes[e.edge.src], alphas->edge(t.kind, t.edge_index(e.edge.src, j)),
                                         alphas->temperature()));
      } else {
        terms.push_back(apply_candidate(e.ops.front(), nodes[e.edge.src]));
      }
    }
    if (terms.empty()) throw ConfigError("intermediate node " + std::to_string(j) + " has no incoming edge");
    nodes.push_back(terms.size() == 1 ? terms.front() : add_n(terms));
  }
  return concat_channels(std::span<const Tensor>(nodes).subspan(t.arity()));
}

}  // namespace cellsearch
