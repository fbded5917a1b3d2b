#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ops.hpp"

namespace cellsearch {

enum class CellKind { kNormal = 0, kReduction, kUpsampling };

inline constexpr std::array<CellKind, 3> kAllCellKinds = {CellKind::kNormal, CellKind::kReduction,
                                                          CellKind::kUpsampling};

std::string_view cell_kind_name(CellKind kind);
CellKind cell_kind_from_name(std::string_view name);

/// Node numbering: inputs first (0 .. arity-1), then intermediates. For an
/// upsampling cell the inputs are (prev, prev_prev, prediction, skip).
struct CellEdge {
  int src = 0;
  int dst = 0;
  friend bool operator==(const CellEdge&, const CellEdge&) = default;
};

struct CellTemplate {
  CellKind kind = CellKind::kNormal;
  int num_intermediate = 3;

  int arity() const { return kind == CellKind::kUpsampling ? 4 : 2; }
  int num_nodes() const { return arity() + num_intermediate; }
  // All (i, j) with i < j, j intermediate; grouped by j, ascending i.
  std::vector<CellEdge> edges() const;
  int num_edges() const;
  int edge_index(int src, int dst) const;
  // Spatial stride of an edge: 2 for reduction edges leaving an input node.
  int edge_stride(int src) const { return (kind == CellKind::kReduction && src < arity()) ? 2 : 1; }
};

/// Architecture logits, one (1,1,1,8) tensor per edge per cell kind, shared
/// by every cell of that kind.
class AlphaSet {
 public:
  AlphaSet() = default;
  explicit AlphaSet(int num_intermediate, double temperature = 1.0);

  int num_intermediate() const { return num_intermediate_; }
  double temperature() const { return temperature_; }
  void set_temperature(double tau);

  CellTemplate cell_template(CellKind kind) const { return {kind, num_intermediate_}; }
  Tensor& edge(CellKind kind, int edge_index) { return alphas_[static_cast<int>(kind)][edge_index]; }
  const Tensor& edge(CellKind kind, int edge_index) const { return alphas_[static_cast<int>(kind)][edge_index]; }
  std::vector<double> weights(CellKind kind, int edge_index) const;

  std::vector<Tensor> parameters() const;
  AlphaSet clone() const;
  void add_constant(double c);

  nlohmann::json to_json() const;
  static AlphaSet from_json(const nlohmann::json& j);

 private:
  int num_intermediate_ = 3;
  double temperature_ = 1.0;
  std::array<std::vector<Tensor>, 3> alphas_;
};

struct GenotypeEdge {
  int src = 0;
  CandidateOpKind op = CandidateOpKind::kSkip;
  friend bool operator==(const GenotypeEdge&, const GenotypeEdge&) = default;
};

struct CellGenotype {
  std::vector<std::vector<GenotypeEdge>> nodes;  // per intermediate node
  friend bool operator==(const CellGenotype&, const CellGenotype&) = default;
};

struct Genotype {
  int num_intermediate = 3;
  int edges_per_node = 2;
  std::map<CellKind, CellGenotype> cells;
  nlohmann::json meta = nlohmann::json::object();

  const CellGenotype& cell(CellKind kind) const;
  // Throws ConfigError on any broken invariant.
  void validate() const;
  std::string hash() const;

  bool same_cells(const Genotype& o) const {
    return num_intermediate == o.num_intermediate && edges_per_node == o.edges_per_node && cells == o.cells;
  }
  friend bool operator==(const Genotype& a, const Genotype& b) { return a.same_cells(b) && a.meta == b.meta; }
};

std::string genotype_to_json(const Genotype& g);
// Throws ParseError with the JSON location of the problem.
Genotype genotype_from_json(std::string_view text);

/// Max over non-Zero operations of the edge's softmax weight.
double edge_strength(const AlphaSet& alphas, CellKind kind, int edge_index);
double edge_strength(std::span<const double> weights);

Genotype discretize(const AlphaSet& alphas, int k = 2);

Genotype sample_random_genotype(int num_intermediate, uint64_t seed, int k = 2);

// ---------------------------------------------------------------------------
// Cells with weights

/// Maps one raw cell input to the cell's channel count and resolution.
struct InputAdapter {
  enum class Kind { kIdentity, kConv, kTransposed, kBilinearConv };
  Kind kind = Kind::kIdentity;
  int scale = 1;  // stride for kConv, upscaling factor otherwise
  Tensor weight;
};

InputAdapter make_adapter(int in_channels, int out_channels, int in_res, int out_res, bool bilinear, Rng& rng);
Tensor apply_adapter(const InputAdapter& a, const Tensor& x);

struct EdgeOps {
  CellEdge edge;
  std::vector<OpInstance> ops;  // all 8 kinds (mixed) or exactly one (discrete)
};

/// A cell instance: input adapters plus per-edge operations. Mixed cells
/// carry the full candidate bank on every edge; discrete cells carry only the
/// genotype's edges.
struct Cell {
  CellTemplate tmpl;
  int channels = 0;
  bool mixed = true;
  std::vector<InputAdapter> adapters;
  std::vector<EdgeOps> edges;

  std::vector<Tensor> parameters() const;
};

struct CellInputSpec {
  int channels = 0;
  int resolution_divisor = 1;  // relative to network input
};

Cell make_mixed_cell(CellKind kind, int num_intermediate, int channels, std::span<const CellInputSpec> inputs,
                     int out_divisor, Rng& rng, bool affine = false);
Cell make_discrete_cell(const Genotype& genotype, CellKind kind, int channels, std::span<const CellInputSpec> inputs,
                        int out_divisor, Rng& rng, bool affine = false);

/// sum_o softmax(alpha, tau)_o * o(x) over the edge's candidate bank.
Tensor mixed_op_forward(const EdgeOps& edge, const Tensor& x, const Tensor& alpha, double temperature);

/// Intermediate node j = sum over incoming edges; output = channel concat of
/// all intermediates (num_intermediate * channels channels).
Tensor cell_forward(const Cell& cell, std::span<const Tensor> inputs, const AlphaSet* alphas);

}  // namespace cellsearch
