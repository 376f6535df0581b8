#pragma once

#include <cmath>
#include <random>
#include <string>

#include "tdhnode/autodiff.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/model_config.hpp"
#include "tdhnode/params.hpp"

namespace tdhnode {

struct SolverConfig {
  int steps_per_interval = 10;
};

/// One classical fourth-order Runge-Kutta step of dy/dt = f(t, y). Works for
/// any State with + and scalar *, including tape Vars.
template <class State, class Scalar, class F>
State rk4_step(F&& f, Scalar t, const State& y, Scalar h) {
  const Scalar half = h / Scalar(2);
  State k1 = f(t, y);
  State k2 = f(t + half, y + k1 * half);
  State k3 = f(t + half, y + k2 * half);
  State k4 = f(t + h, y + k3 * h);
  return y + (k1 + k2 * Scalar(2) + k3 * Scalar(2) + k4) * (h / Scalar(6));
}

/// `steps` equal RK4 substeps from t0 to t1. `after_step` sees each new state.
template <class State, class Scalar, class F, class Check>
State rk4_integrate(F&& f, State y, Scalar t0, Scalar t1, int steps, Check&& after_step) {
  if (steps < 1) throw Error(ErrorCode::ConfigInvalid, "RK4 needs at least one step");
  const Scalar h = (t1 - t0) / Scalar(steps);
  for (int s = 0; s < steps; ++s) {
    y = rk4_step(f, t0 + Scalar(s) * h, y, h);
    after_step(y);
  }
  return y;
}

template <class State, class Scalar, class F>
State rk4_integrate(F&& f, State y, Scalar t0, Scalar t1, int steps) {
  return rk4_integrate(std::forward<F>(f), std::move(y), t0, t1, steps, [](const State&) {});
}

template <class T>
void register_engine_parameters(ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  const Eigen::Index d = cfg.dim;
  store.add_uniform("theta", d, d, d, rng);
  store.add_uniform("readout.w", d, 1, d, rng);
  store.add_uniform("readout.b", 1, 1, d, rng);
}

/// dS/dt = -L (S + R) Theta, with R the n x d risk rows (value level).
template <class T>
Matrix<T> dynamics(const Matrix<T>& state, const Matrix<T>& risk_rows, const Matrix<T>& laplacian,
                   const Matrix<T>& theta) {
  if (state.rows() != laplacian.rows() || laplacian.rows() != laplacian.cols() || state.cols() != theta.rows() ||
      theta.rows() != theta.cols() || risk_rows.rows() != state.rows() || risk_rows.cols() != state.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "dynamics operand shapes disagree");
  }
  return -(laplacian * (state + risk_rows) * theta);
}

/// Broadcast form: one 1 x d risk encoding added to every row.
template <class T>
Matrix<T> dynamics_broadcast(const Matrix<T>& state, const Matrix<T>& risk_encoding, const Matrix<T>& laplacian,
                             const Matrix<T>& theta) {
  if (risk_encoding.rows() != 1) throw Error(ErrorCode::ShapeMismatch, "risk encoding must be a row");
  return dynamics<T>(state, risk_encoding.replicate(state.rows(), 1), laplacian, theta);
}

/// Latent dynamics, integration between encounters and sigmoid readout.
template <class T>
class NodeEngine {
 public:
  using V = ad::Var<T>;

  NodeEngine(const ModelConfig& cfg, ParameterStore<T>& params) : cfg_(cfg), params_(params) {}

  /// S(t1) from S(t0) with the Laplacian and risk rows held constant over
  /// [t0, t1]. Time is measured in ODE units of `months_per_unit` months.
  V integrate(ad::Tape<T>& tape, const V& state, double t0, double t1, const V& risk_rows, const V& laplacian) const {
    if (!(t1 > t0)) throw Error(ErrorCode::NonIncreasingTimestamps, "integration interval must be increasing");
    if (state.rows() != laplacian.rows() || risk_rows.rows() != state.rows() || risk_rows.cols() != state.cols()) {
      throw Error(ErrorCode::ShapeMismatch, "integrate operand shapes disagree");
    }
    V theta = tape.parameter(params_.at("theta"));
    // L (S + R) Theta = L S Theta + L R Theta; the second term is fixed per interval.
    V drive = ad::matmul(ad::matmul(laplacian, risk_rows), theta);
    auto f = [&](T, const V& s) { return -(ad::matmul(ad::matmul(laplacian, s), theta) + drive); };
    const T limit = static_cast<T>(cfg_.divergence_limit);
    const T span = static_cast<T>((t1 - t0) / cfg_.months_per_unit);
    return rk4_integrate(f, state, T(0), span, cfg_.rk4_steps, [&](const V& s) {
      const auto& v = s.value();
      if (!v.allFinite() || v.cwiseAbs().maxCoeff() > limit) {
        throw Error(ErrorCode::NonFiniteState, "hidden state diverged while integrating [" + std::to_string(t0) +
                                                   ", " + std::to_string(t1) + "], max |S| = " +
                                                   std::to_string(static_cast<double>(v.cwiseAbs().maxCoeff())));
      }
    });
  }

  /// n x 1 logits, one shared linear readout per marker row.
  V logits(ad::Tape<T>& tape, const V& state) const {
    return ad::add_row(ad::matmul(state, tape.parameter(params_.at("readout.w"))),
                       tape.parameter(params_.at("readout.b")));
  }

  /// n x 1 probabilities sigma(readout(S_i)).
  V decode(ad::Tape<T>& tape, const V& state) const { return ad::sigmoid(logits(tape, state)); }

  Matrix<T> decode(const Matrix<T>& state) const {
    ad::Tape<T> tape(false);
    return decode(tape, tape.constant(state)).value();
  }

 private:
  const ModelConfig& cfg_;
  ParameterStore<T>& params_;
};

}  // namespace tdhnode
