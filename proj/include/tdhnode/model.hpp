#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "tdhnode/autodiff.hpp"
#include "tdhnode/data.hpp"
#include "tdhnode/encoders.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/hypergraph.hpp"
#include "tdhnode/laplacian.hpp"
#include "tdhnode/model_config.hpp"
#include "tdhnode/node_engine.hpp"
#include "tdhnode/params.hpp"

namespace tdhnode {

/// Tape handles of one patient rollout. logits[k] is the n x 1 prediction
/// for encounter k (k >= 1; logits[0] is unset).
template <class T>
struct Rollout {
  std::vector<ad::Var<T>> logits;
  std::vector<ad::Var<T>> states;  // states[k] = S(t_k)
  std::vector<LaplacianVars<T>> laplacians;  // laplacians[k] drives [t_k, t_k+1]
};

/// The full model: encoders, Laplacian builder and ODE engine over one
/// progression hypergraph. Parameters are registered in a fixed order from a
/// single seed.
template <class T>
class Model {
 public:
  using V = ad::Var<T>;

  Model(const ModelConfig& cfg, const ProgressionHypergraph& hg, std::uint64_t seed)
      : core_((cfg.validate(), std::make_unique<Core>(cfg, hg))) {
    if (cfg.n_markers != hg.num_markers()) {
      throw Error(ErrorCode::DimensionMismatch, "config has " + std::to_string(cfg.n_markers) +
                                                    " markers, hypergraph has " + std::to_string(hg.num_markers()));
    }
    if (hg.max_trajectory_length() + 1 > cfg.index_table_length) {
      throw Error(ErrorCode::ConfigInvalid, "index_table_length is shorter than the longest trajectory");
    }
    std::mt19937_64 rng(seed);
    register_encoder_parameters(core_->params, core_->cfg, rng);
    register_laplacian_parameters(core_->params, core_->cfg, rng);
    register_engine_parameters(core_->params, core_->cfg, rng);
  }

  const ModelConfig& config() const { return core_->cfg; }
  const ProgressionHypergraph& hypergraph() const { return core_->hg; }
  ParameterStore<T>& params() { return core_->params; }
  const ParameterStore<T>& params() const { return core_->params; }
  const Encoders<T>& encoders() const { return core_->encoders; }
  const LaplacianBuilder<T>& laplacian_builder() const { return core_->builder; }
  const NodeEngine<T>& engine() const { return core_->engine; }

  /// Same architecture and parameter values in another scalar type.
  template <class U>
  Model<U> cast() const {
    Model<U> out(core_->cfg, core_->hg, 0);
    out.params().assign_from(core_->params);
    return out;
  }

  /// Teacher-forced rollout over the valid encounters of `seq`: the
  /// TD-Hypergraph at t_k uses ground-truth onsets up to t_k.
  Rollout<T> rollout(ad::Tape<T>& tape, const PatientSequence& seq, const DropoutContext& dropout = {},
                     bool keep_laplacians = false) const {
    const Core& c = *core_;
    const std::size_t n = c.hg.num_markers();
    if (seq.valid_length == 0) throw Error(ErrorCode::MalformedRecord, seq.patient_id + ": empty sequence");
    const OnsetMap onsets = seq.onsets(n);
    V markers = c.encoders.embed_markers(tape);

    Rollout<T> out;
    out.logits.resize(seq.valid_length);
    auto risk = [&](std::size_t k) {
      const auto& x = seq.encounters[k].x;
      std::vector<T> xt(x.begin(), x.end());
      return c.encoders.encode_risk(tape, std::span<const T>(xt));
    };
    V state = c.encoders.init_hidden_state(tape, markers, seq.encounters[0].y, risk(0));
    out.states.push_back(state);
    for (std::size_t k = 0; k + 1 < seq.valid_length; ++k) {
      const double tk = seq.encounters[k].t;
      const TDHypergraph td = td_snapshot(c.hg, onsets, tk);
      LaplacianVars<T> lap = c.builder.build(tape, markers, td, dropout);
      V rows = c.encoders.risk_rows(tape, risk(k));
      state = c.engine.integrate(tape, state, tk, seq.encounters[k + 1].t, rows, lap.laplacian);
      out.states.push_back(state);
      out.logits[k + 1] = c.engine.logits(tape, state);
      if (keep_laplacians) out.laplacians.push_back(std::move(lap));
    }
    return out;
  }

  /// Summed masked BCE over all predicted encounters of one patient and the
  /// number of (encounter, marker) pairs it covers. Positives are weighted by
  /// `positive_weight`.
  std::pair<V, std::size_t> patient_loss(ad::Tape<T>& tape, const PatientSequence& seq, const OnsetLabels& labels,
                                         const DropoutContext& dropout = {}, T positive_weight = T(1)) const {
    Rollout<T> r = rollout(tape, seq, dropout);
    const auto n = static_cast<Eigen::Index>(labels.n);
    std::vector<V> terms;
    std::size_t count = 0;
    for (std::size_t k = 1; k < seq.valid_length; ++k) {
      Matrix<T> target(n, 1), weight(n, 1);
      bool any = false;
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        target(i, 0) = labels.target_at(k, ui) ? T(1) : T(0);
        weight(i, 0) = labels.mask_at(k, ui) ? (labels.target_at(k, ui) ? positive_weight : T(1)) : T(0);
        if (labels.mask_at(k, ui)) {
          any = true;
          ++count;
        }
      }
      if (any) terms.push_back(ad::weighted_bce_with_logits_sum(r.logits[k], target, weight));
    }
    if (terms.empty()) return {tape.scalar(T(0)), 0};
    V total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
    return {total, count};
  }

  /// Probabilities per encounter, steps x n; row 0 and padded rows are zero.
  Matrix<T> predict(const PatientSequence& seq) const {
    ad::Tape<T> tape(false);
    Rollout<T> r = rollout(tape, seq);
    const auto n = static_cast<Eigen::Index>(core_->hg.num_markers());
    Matrix<T> probs = Matrix<T>::Zero(static_cast<Eigen::Index>(seq.encounters.size()), n);
    for (std::size_t k = 1; k < seq.valid_length; ++k)
      probs.row(static_cast<Eigen::Index>(k)) = ad::sigmoid(r.logits[k]).value().transpose();
    return probs;
  }

  /// Hidden state at the last valid encounter, n x d.
  Matrix<T> final_state(const PatientSequence& seq) const {
    ad::Tape<T> tape(false);
    return rollout(tape, seq).states.back().value();
  }

  /// Laplacian ingredients of the TD-Hypergraph at encounter k.
  LaplacianBundle<T> laplacian_at(const PatientSequence& seq, std::size_t k) const {
    if (k >= seq.valid_length) {
      throw Error(ErrorCode::IndexOutOfRange, "encounter " + std::to_string(k) + " of " +
                                                  std::to_string(seq.valid_length));
    }
    const Core& c = *core_;
    ad::Tape<T> tape(false);
    V markers = c.encoders.embed_markers(tape);
    const TDHypergraph td = td_snapshot(c.hg, seq.onsets(c.hg.num_markers()), seq.encounters[k].t);
    return c.builder.build(tape, markers, td).values();
  }

 private:
  struct Core {
    Core(const ModelConfig& c, const ProgressionHypergraph& h)
        : cfg(c),
          hg(h),
          table(std::make_shared<const Matrix<T>>(sinusoidal_table<T>(c.index_table_length, c.dim))),
          encoders(cfg, params, table),
          builder(cfg, params, encoders, hg),
          engine(cfg, params) {}
    ModelConfig cfg;
    ProgressionHypergraph hg;
    ParameterStore<T> params;
    std::shared_ptr<const Matrix<T>> table;
    Encoders<T> encoders;
    LaplacianBuilder<T> builder;
    NodeEngine<T> engine;
  };
  std::unique_ptr<Core> core_;
};

}  // namespace tdhnode
