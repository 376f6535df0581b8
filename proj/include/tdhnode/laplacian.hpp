#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tdhnode/autodiff.hpp"
#include "tdhnode/encoders.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/hypergraph.hpp"
#include "tdhnode/model_config.hpp"
#include "tdhnode/params.hpp"

namespace tdhnode {

/// Values of one assembled TD-Hypergraph Laplacian and its ingredients.
template <class T>
struct LaplacianBundle {
  Matrix<T> incidence;       // H_p, n x m
  Matrix<T> edge_weights;    // W_p, m x m
  Matrix<T> node_degree;     // D_v, n x n diagonal
  Matrix<T> edge_degree;     // D_e, m x m diagonal
  Matrix<T> laplacian;       // n x n
  std::vector<Matrix<T>> attention;  // per trajectory, |e| x 1 in position order
  std::vector<std::size_t> frontier;
  double as_of = 0.0;
};

/// Tape handles of one Laplacian construction.
template <class T>
struct LaplacianVars {
  ad::Var<T> incidence;
  ad::Var<T> edge_weights;
  ad::Var<T> node_degree;  // n x 1
  ad::Var<T> edge_degree;  // 1 x m
  ad::Var<T> laplacian;
  std::vector<ad::Var<T>> attention;
  std::vector<std::size_t> frontier;
  double as_of = 0.0;

  LaplacianBundle<T> values() const {
    LaplacianBundle<T> b;
    b.incidence = incidence.value();
    b.edge_weights = edge_weights.value();
    b.node_degree = node_degree.value().col(0).asDiagonal();
    b.edge_degree = edge_degree.value().row(0).asDiagonal();
    b.laplacian = laplacian.value();
    for (const auto& a : attention) b.attention.push_back(a.value());
    b.frontier = frontier;
    b.as_of = as_of;
    return b;
  }
};

template <class T>
void register_laplacian_parameters(ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  const Eigen::Index d = cfg.dim;
  const Eigen::Index hidden = static_cast<Eigen::Index>(cfg.dim) * cfg.ff_expansion;
  store.add_uniform("attn.wq", d, d, d, rng);
  store.add_uniform("attn.wk", d, d, d, rng);
  store.add_uniform("attn.wv", d, d, d, rng);
  store.add_uniform("attn.virtual_start", 1, d, d, rng);
  for (int l = 0; l < cfg.context_layers; ++l) {
    const std::string p = "ctx.l" + std::to_string(l) + ".";
    // Layer 0 projects with attn.wq/wk/wv; deeper layers have their own.
    if (l > 0) {
      store.add_uniform(p + "wq", d, d, d, rng);
      store.add_uniform(p + "wk", d, d, d, rng);
      store.add_uniform(p + "wv", d, d, d, rng);
    }
    store.add_uniform(p + "wo", d, d, d, rng);
    store.add_uniform(p + "ff1.w", d, hidden, d, rng);
    store.add_uniform(p + "ff1.b", 1, hidden, d, rng);
    store.add_uniform(p + "ff2.w", hidden, d, hidden, rng);
    store.add_uniform(p + "ff2.b", 1, d, hidden, rng);
  }
  store.add_uniform("traj.proj", d, d, d, rng);
}

/// Degree vectors: node degrees Sum_e H(i,e) W(e,e) as n x 1, edge degrees
/// Sum_i H(i,e) as 1 x m, both floored at `floor`.
template <class T>
std::pair<ad::Var<T>, ad::Var<T>> degree_vectors(const ad::Var<T>& incidence, const ad::Var<T>& edge_weights,
                                                 const ad::Var<T>& edge_degree_source, T floor) {
  ad::Var<T> dv = ad::clamp_min(ad::matmul(incidence, ad::diagonal(edge_weights)), floor);
  ad::Var<T> de = ad::clamp_min(ad::sum_rows(edge_degree_source), floor);
  return {dv, de};
}

/// I - Dv^-1/2 H W De^-1 H^T Dv^-1/2 from degree vectors (n x 1, 1 x m).
template <class T>
ad::Var<T> assemble_laplacian(const ad::Var<T>& incidence, const ad::Var<T>& edge_weights,
                              const ad::Var<T>& node_degree, const ad::Var<T>& edge_degree) {
  ad::Var<T> scaled = ad::scale_rows(incidence, ad::pow(node_degree, T(-0.5)));
  ad::Var<T> left = ad::scale_cols(ad::matmul(scaled, edge_weights), ad::pow(edge_degree, T(-1)));
  ad::Var<T> lap = ad::identity_minus(ad::matmul_nt(left, scaled));
  if (!lap.value().allFinite()) throw Error(ErrorCode::NonFiniteLaplacian, "laplacian has NaN/Inf entries");
  return lap;
}

/// Value-level degree matrices (diagonal n x n and m x m).
template <class T>
std::pair<Matrix<T>, Matrix<T>> degree_matrices(const Matrix<T>& incidence, const Matrix<T>& edge_weights,
                                                T floor = T(1e-8)) {
  ad::Tape<T> tape(false);
  auto h = tape.constant(incidence);
  auto [dv, de] = degree_vectors(h, tape.constant(edge_weights), h, floor);
  return {Matrix<T>(dv.value().col(0).asDiagonal()), Matrix<T>(de.value().row(0).asDiagonal())};
}

/// Value-level Laplacian from diagonal degree matrices.
template <class T>
Matrix<T> assemble_laplacian(const Matrix<T>& incidence, const Matrix<T>& edge_weights, const Matrix<T>& node_degree,
                             const Matrix<T>& edge_degree) {
  ad::Tape<T> tape(false);
  Matrix<T> dv = node_degree.diagonal();
  Matrix<T> de = edge_degree.diagonal().transpose();
  return assemble_laplacian(tape.constant(incidence), tape.constant(edge_weights), tape.constant(dv),
                            tape.constant(de))
      .value();
}

/// Dropout source for the context encoder. A null rng means evaluation mode.
struct DropoutContext {
  std::mt19937_64* rng = nullptr;
  double rate = 0.0;

  bool active() const { return rng != nullptr && rate > 0.0; }
};

/// Builds H_p, W_p and the assembled Laplacian for one TD-Hypergraph.
template <class T>
class LaplacianBuilder {
 public:
  using V = ad::Var<T>;

  LaplacianBuilder(const ModelConfig& cfg, ParameterStore<T>& params, const Encoders<T>& encoders,
                   const ProgressionHypergraph& hg)
      : cfg_(cfg), params_(params), encoders_(encoders), hg_(hg), binary_(binary_incidence<T>(hg)) {}

  /// Token rows b_i + phi(i) of one hyperedge in position order: time
  /// encodings on the past set, index encodings (1-based) on the potential set.
  V tokens(ad::Tape<T>& tape, const V& markers, const TDHyperedge& e) const {
    std::vector<V> rows;
    rows.reserve(e.size());
    V all = markers;
    for (std::size_t p = 0; p < e.size(); ++p) {
      V b = ad::select_rows(all, {e.trajectory->markers[p]});
      V phi = p < e.frontier ? encoders_.encode_time(tape, *e.entries[p]) : encoders_.encode_index(tape, p + 1);
      rows.push_back(b + phi);
    }
    return ad::vstack(rows);
  }

  /// Cross-attention from the frontier marker (Eq. of the adaptive incidence):
  /// |e| x 1 weights whose past part and potential part each sum to one.
  V cross_attention(ad::Tape<T>& tape, const V& markers, const TDHyperedge& e, const V& token_rows) const {
    const FrontierSplit split = split_frontier(e);
    V wq = tape.parameter(params_.at("attn.wq"));
    V wk = tape.parameter(params_.at("attn.wk"));
    V keys = ad::matmul(token_rows, wk);
    std::vector<V> parts;
    if (!split.past.empty()) {
      V q_time = ad::matmul(ad::select_rows(token_rows, {split.frontier - 1}), wq);
      parts.push_back(ad::transpose(ad::multihead_attention_weights(q_time, ad::select_rows(keys, split.past), cfg_.heads)));
    }
    if (!split.potential.empty()) {
      V anchor;
      if (split.frontier == 0) {
        anchor = tape.parameter(params_.at("attn.virtual_start")) + encoders_.encode_index(tape, 0);
      } else {
        anchor = ad::select_rows(markers, {e.trajectory->markers[split.frontier - 1]}) +
                 encoders_.encode_index(tape, split.frontier);
      }
      V q_idx = ad::matmul(anchor, wq);
      parts.push_back(
          ad::transpose(ad::multihead_attention_weights(q_idx, ad::select_rows(keys, split.potential), cfg_.heads)));
    }
    return parts.size() == 1 ? parts.front() : ad::vstack(parts);
  }

  /// Trajectory embedding g_j: self-attention context rows computed
  /// separately over the past and potential sets, averaged over all positions.
  V trajectory_embedding(ad::Tape<T>& tape, const TDHyperedge& e, const V& token_rows,
                         const DropoutContext& dropout) const {
    const FrontierSplit split = split_frontier(e);
    std::vector<V> ctx;
    for (const auto* subset : {&split.past, &split.potential}) {
      if (subset->empty()) continue;
      ctx.push_back(context_encoder(tape, ad::select_rows(token_rows, *subset), dropout));
    }
    return ad::mean_rows(ctx.size() == 1 ? ctx.front() : ad::vstack(ctx));
  }

  LaplacianVars<T> build(ad::Tape<T>& tape, const V& markers, const TDHypergraph& td,
                         const DropoutContext& dropout = {}) const {
    const std::size_t m = hg_.num_trajectories();
    const auto n = static_cast<Eigen::Index>(hg_.num_markers());
    LaplacianVars<T> out;
    out.as_of = td.as_of;
    std::vector<V> columns;
    std::vector<std::vector<std::size_t>> rows;
    std::vector<V> embeddings;
    const bool need_tokens = cfg_.adaptive_incidence || cfg_.learnable_weights;
    for (std::size_t j = 0; j < m; ++j) {
      const TDHyperedge& e = td.hyperedges.at(j);
      out.frontier.push_back(e.frontier);
      if (!need_tokens) continue;
      V tok = tokens(tape, markers, e);
      if (cfg_.adaptive_incidence) {
        V alpha = cross_attention(tape, markers, e, tok);
        out.attention.push_back(alpha);
        columns.push_back(alpha);
        rows.push_back(e.trajectory->markers);
      }
      if (cfg_.learnable_weights) embeddings.push_back(trajectory_embedding(tape, e, tok, dropout));
    }
    V binary = tape.constant(binary_);
    out.incidence = cfg_.adaptive_incidence ? ad::scatter_columns(n, columns, rows) : binary;
    if (cfg_.learnable_weights) {
      V projected = ad::matmul(ad::vstack(embeddings), tape.parameter(params_.at("traj.proj")));
      out.edge_weights = ad::matmul_nt(projected, projected);
    } else {
      out.edge_weights = tape.constant(Matrix<T>::Identity(m, m));
    }
    auto [dv, de] = degree_vectors(out.incidence, out.edge_weights,
                                   cfg_.edge_degree_from_binary ? binary : out.incidence,
                                   static_cast<T>(cfg_.degree_floor));
    out.node_degree = dv;
    out.edge_degree = de;
    out.laplacian = assemble_laplacian(out.incidence, out.edge_weights, dv, de);
    return out;
  }

  const Matrix<T>& binary() const { return binary_; }

 private:
  V dropout(const V& x, const DropoutContext& ctx) const {
    if (!ctx.active()) return x;
    std::bernoulli_distribution keep(1.0 - ctx.rate);
    const T scale = T(1) / T(1.0 - ctx.rate);
    Matrix<T> mask(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = keep(*ctx.rng) ? scale : T(0);
    return ad::apply_mask(x, std::move(mask));
  }

  V context_encoder(ad::Tape<T>& tape, V x, const DropoutContext& drop) const {
    for (int l = 0; l < cfg_.context_layers; ++l) {
      const std::string p = "ctx.l" + std::to_string(l) + ".";
      const std::string proj = l == 0 ? "attn." : p;
      V q = ad::matmul(x, tape.parameter(params_.at(proj + "wq")));
      V k = ad::matmul(x, tape.parameter(params_.at(proj + "wk")));
      V v = ad::matmul(x, tape.parameter(params_.at(proj + "wv")));
      V attn = ad::matmul(ad::multihead_self_attention(q, k, v, cfg_.heads), tape.parameter(params_.at(p + "wo")));
      x = x + dropout(attn, drop);
      V hidden = ad::gelu(ad::add_row(ad::matmul(x, tape.parameter(params_.at(p + "ff1.w"))),
                                      tape.parameter(params_.at(p + "ff1.b"))));
      V ff = ad::add_row(ad::matmul(hidden, tape.parameter(params_.at(p + "ff2.w"))),
                         tape.parameter(params_.at(p + "ff2.b")));
      x = x + dropout(ff, drop);
    }
    return x;
  }

  const ModelConfig& cfg_;
  ParameterStore<T>& params_;
  const Encoders<T>& encoders_;
  const ProgressionHypergraph& hg_;
  Matrix<T> binary_;
};

}  // namespace tdhnode
