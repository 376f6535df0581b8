#pragma once

#include <cstddef>
#include <string>

#include <nlohmann/json.hpp>

#include "tdhnode/errors.hpp"

namespace tdhnode {

/// How h(x) enters the dynamics: one d-vector added to every marker row, or
/// that vector gated per marker by a learnable n x d scale.
enum class RiskInjection { Broadcast, PerNode };

/// Architecture hyperparameters. Defaults follow the reference setup
/// (d = 128, 8 heads, 2 context layers, expansion 4, dropout 0.1, RK4 with
/// 10 steps).
struct ModelConfig {
  std::size_t n_markers = 0;
  std::size_t n_risk = 0;
  int dim = 128;
  int heads = 8;
  int context_layers = 2;
  int ff_expansion = 4;
  double dropout = 0.1;
  int rk4_steps = 10;
  // ODE time unit in months; intervals are divided by this before integration.
  double months_per_unit = 120.0;
  bool adaptive_incidence = true;
  bool learnable_weights = true;
  // Hyperedge degrees from the binary incidence instead of H_p.
  bool edge_degree_from_binary = false;
  double degree_floor = 1e-8;
  double divergence_limit = 1e6;
  std::size_t index_table_length = 64;
  RiskInjection risk_injection = RiskInjection::Broadcast;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigInvalid, m); };
    if (n_markers == 0) fail("n_markers must be positive");
    if (dim <= 0) fail("dim must be positive");
    if (heads <= 0 || dim % heads != 0) fail("dim must be divisible by heads");
    if (context_layers < 1) fail("context_layers must be >= 1");
    if (ff_expansion < 1) fail("ff_expansion must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0,1)");
    if (rk4_steps < 1) fail("rk4_steps must be >= 1");
    if (!(months_per_unit > 0.0)) fail("months_per_unit must be positive");
    if (!(degree_floor > 0.0)) fail("degree_floor must be positive");
    if (index_table_length < 2) fail("index_table_length must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_markers", c.n_markers},
                     {"n_risk", c.n_risk},
                     {"dim", c.dim},
                     {"heads", c.heads},
                     {"context_layers", c.context_layers},
                     {"ff_expansion", c.ff_expansion},
                     {"dropout", c.dropout},
                     {"rk4_steps", c.rk4_steps},
                     {"months_per_unit", c.months_per_unit},
                     {"adaptive_incidence", c.adaptive_incidence},
                     {"learnable_weights", c.learnable_weights},
                     {"edge_degree_from_binary", c.edge_degree_from_binary},
                     {"degree_floor", c.degree_floor},
                     {"divergence_limit", c.divergence_limit},
                     {"index_table_length", c.index_table_length},
                     {"risk_injection", c.risk_injection == RiskInjection::Broadcast ? "broadcast" : "per_node"}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_markers = j.value("n_markers", d.n_markers);
  c.n_risk = j.value("n_risk", d.n_risk);
  c.dim = j.value("dim", d.dim);
  c.heads = j.value("heads", d.heads);
  c.context_layers = j.value("context_layers", d.context_layers);
  c.ff_expansion = j.value("ff_expansion", d.ff_expansion);
  c.dropout = j.value("dropout", d.dropout);
  c.rk4_steps = j.value("rk4_steps", d.rk4_steps);
  c.months_per_unit = j.value("months_per_unit", d.months_per_unit);
  c.adaptive_incidence = j.value("adaptive_incidence", d.adaptive_incidence);
  c.learnable_weights = j.value("learnable_weights", d.learnable_weights);
  c.edge_degree_from_binary = j.value("edge_degree_from_binary", d.edge_degree_from_binary);
  c.degree_floor = j.value("degree_floor", d.degree_floor);
  c.divergence_limit = j.value("divergence_limit", d.divergence_limit);
  c.index_table_length = j.value("index_table_length", d.index_table_length);
  const std::string inj = j.value("risk_injection", std::string("broadcast"));
  if (inj == "broadcast") {
    c.risk_injection = RiskInjection::Broadcast;
  } else if (inj == "per_node") {
    c.risk_injection = RiskInjection::PerNode;
  } else {
    throw Error(ErrorCode::ConfigInvalid, "risk_injection must be broadcast or per_node");
  }
}

}  // namespace tdhnode
