#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "tdhnode/autodiff.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/model_config.hpp"
#include "tdhnode/params.hpp"

namespace tdhnode {

/// Fixed sinusoidal position table: row i holds sin/cos pairs
/// (sin(i / 10000^(2k/d)), cos(i / 10000^(2k/d))) for k = 0, 1, ...
template <class T>
Matrix<T> sinusoidal_table(std::size_t length, int d, double base = 10000.0) {
  Matrix<T> table(static_cast<Eigen::Index>(length), d);
  for (std::size_t i = 0; i < length; ++i) {
    for (int c = 0; c < d; ++c) {
      const int k = c / 2;
      const double angle = static_cast<double>(i) / std::pow(base, 2.0 * k / d);
      table(i, c) = static_cast<T>(c % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return table;
}

/// Registers every encoder parameter. Call order fixes the RNG stream.
template <class T>
void register_encoder_parameters(ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  const auto n = static_cast<Eigen::Index>(cfg.n_markers);
  const auto c = static_cast<Eigen::Index>(cfg.n_risk);
  const Eigen::Index d = cfg.dim;
  store.add_uniform("marker.w1", n, d, n, rng);
  store.add_uniform("marker.b1", 1, d, n, rng);
  store.add_uniform("marker.w2", d, d, d, rng);
  store.add_uniform("marker.b2", 1, d, d, rng);

  // Learnable frequencies start on a geometric ladder from 1 to 1e-3 rad/month.
  Matrix<T> freq(1, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    const double e = d > 1 ? 3.0 * static_cast<double>(k) / static_cast<double>(d - 1) : 0.0;
    freq(0, k) = static_cast<T>(std::pow(10.0, -e));
  }
  store.add("time.freq", std::move(freq));
  store.add("time.phase", Matrix<T>::Zero(1, d));

  store.add_uniform("risk.w1", c, d, std::max<Eigen::Index>(c, 1), rng);
  store.add_uniform("risk.b1", 1, d, std::max<Eigen::Index>(c, 1), rng);
  store.add_uniform("risk.w2", d, d, d, rng);
  store.add_uniform("risk.b2", 1, d, d, rng);
  if (cfg.risk_injection == RiskInjection::PerNode) store.add("risk.node_scale", Matrix<T>::Ones(n, d));

  store.add_uniform("init.w1", 2 * d + 1, d, 2 * d + 1, rng);
  store.add_uniform("init.b1", 1, d, 2 * d + 1, rng);
  store.add_uniform("init.w2", d, d, d, rng);
  store.add_uniform("init.b2", 1, d, d, rng);
}

/// Marker identity, continuous-time, index and risk-factor encoders plus the
/// initial hidden state. All tape-level methods are pure functions of the
/// parameters and inputs.
template <class T>
class Encoders {
 public:
  using V = ad::Var<T>;

  Encoders(const ModelConfig& cfg, ParameterStore<T>& params)
      : Encoders(cfg, params, std::make_shared<const Matrix<T>>(sinusoidal_table<T>(cfg.index_table_length, cfg.dim))) {}

  Encoders(const ModelConfig& cfg, ParameterStore<T>& params, std::shared_ptr<const Matrix<T>> index_table)
      : cfg_(cfg), params_(params), index_table_(std::move(index_table)) {}

  /// n x d, row i = MLP(onehot(i)); the one-hot product is the row of w1.
  V embed_markers(ad::Tape<T>& tape) const {
    V w1 = tape.parameter(params_.at("marker.w1"));
    V hidden = ad::gelu(ad::add_row(w1, tape.parameter(params_.at("marker.b1"))));
    return ad::add_row(ad::matmul(hidden, tape.parameter(params_.at("marker.w2"))),
                       tape.parameter(params_.at("marker.b2")));
  }

  /// 1 x d, cos(freq * t + phase) / sqrt(d).
  V encode_time(ad::Tape<T>& tape, double t) const {
    V arg = ad::affine_scalar(tape.parameter(params_.at("time.freq")), static_cast<T>(t),
                              tape.parameter(params_.at("time.phase")));
    return ad::cos(arg) * (T(1) / std::sqrt(T(cfg_.dim)));
  }

  /// 1 x d constant row of the sinusoidal table.
  V encode_index(ad::Tape<T>& tape, std::size_t i) const { return tape.constant(index_row(i)); }

  Matrix<T> index_row(std::size_t i) const {
    if (i >= static_cast<std::size_t>(index_table_->rows())) {
      throw Error(ErrorCode::IndexOutOfRange, "index encoding position " + std::to_string(i));
    }
    return index_table_->row(static_cast<Eigen::Index>(i));
  }

  /// 1 x d, two-layer perceptron c -> d -> d.
  V encode_risk(ad::Tape<T>& tape, std::span<const T> x) const {
    if (x.size() != cfg_.n_risk) {
      throw Error(ErrorCode::DimensionMismatch,
                  "risk vector length " + std::to_string(x.size()) + " != " + std::to_string(cfg_.n_risk));
    }
    Matrix<T> xm(1, static_cast<Eigen::Index>(x.size()));
    for (std::size_t k = 0; k < x.size(); ++k) xm(0, k) = x[k];
    V xin = tape.constant(std::move(xm));
    V hidden = ad::gelu(
        ad::add_row(ad::matmul(xin, tape.parameter(params_.at("risk.w1"))), tape.parameter(params_.at("risk.b1"))));
    return ad::add_row(ad::matmul(hidden, tape.parameter(params_.at("risk.w2"))),
                       tape.parameter(params_.at("risk.b2")));
  }

  /// n x d risk contribution added to the state inside the dynamics.
  V risk_rows(ad::Tape<T>& tape, const V& encoded) const {
    V rows = ad::broadcast_rows(encoded, static_cast<Eigen::Index>(cfg_.n_markers));
    if (cfg_.risk_injection == RiskInjection::PerNode) {
      rows = ad::hadamard(rows, tape.parameter(params_.at("risk.node_scale")));
    }
    return rows;
  }

  /// S(t1): row i = MLP([b_i ; y1_i ; h(x1)]), a row-local map.
  V init_hidden_state(ad::Tape<T>& tape, const V& markers, std::span<const std::uint8_t> y1,
                      const V& encoded_risk) const {
    const auto n = static_cast<Eigen::Index>(cfg_.n_markers);
    if (y1.size() != cfg_.n_markers) {
      throw Error(ErrorCode::DimensionMismatch, "initial status length " + std::to_string(y1.size()));
    }
    Matrix<T> status(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) status(i, 0) = y1[i] ? T(1) : T(0);
    V input = ad::hstack<T>({markers, tape.constant(std::move(status)), ad::broadcast_rows(encoded_risk, n)});
    V hidden = ad::gelu(
        ad::add_row(ad::matmul(input, tape.parameter(params_.at("init.w1"))), tape.parameter(params_.at("init.b1"))));
    return ad::add_row(ad::matmul(hidden, tape.parameter(params_.at("init.w2"))),
                       tape.parameter(params_.at("init.b2")));
  }

  // Value-level conveniences (no gradient recording).

  Matrix<T> embed_markers() const {
    ad::Tape<T> tape(false);
    return embed_markers(tape).value();
  }
  Matrix<T> encode_time(double t) const {
    ad::Tape<T> tape(false);
    return encode_time(tape, t).value();
  }
  Matrix<T> encode_index(std::size_t i) const { return index_row(i); }
  Matrix<T> encode_risk(std::span<const T> x) const {
    ad::Tape<T> tape(false);
    return encode_risk(tape, x).value();
  }
  Matrix<T> init_hidden_state(std::span<const std::uint8_t> y1, std::span<const T> x1) const {
    ad::Tape<T> tape(false);
    V b = embed_markers(tape);
    V h = encode_risk(tape, x1);
    return init_hidden_state(tape, b, y1, h).value();
  }

  const ModelConfig& config() const { return cfg_; }

 private:
  const ModelConfig& cfg_;
  ParameterStore<T>& params_;
  std::shared_ptr<const Matrix<T>> index_table_;
};

}  // namespace tdhnode
