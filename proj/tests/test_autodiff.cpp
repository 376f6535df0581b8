#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "fixtures.hpp"

using namespace tdhnode;
using M = Matrix<double>;
using V = ad::Var<double>;
using Op = std::function<V(ad::Tape<double>&, std::vector<V>&)>;

namespace {

M random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = u(rng);
  return m;
}

// Contracts the op output with a fixed random weight so every output entry
// contributes to the scalar being differentiated.
double evaluate(const Op& op, std::vector<Parameter<double>>& inputs, const M& weight) {
  ad::Tape<double> tape(false);
  std::vector<V> vars;
  for (auto& p : inputs) vars.push_back(tape.parameter(p));
  return op(tape, vars).value().cwiseProduct(weight).sum();
}

void check_gradient(const Op& op, std::vector<M> values, double tol = 1e-7, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  std::vector<Parameter<double>> inputs(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    inputs[k].name = "in" + std::to_string(k);
    inputs[k].value = values[k];
    inputs[k].zero_grad();
  }
  M weight;
  {
    ad::Tape<double> probe(false);
    std::vector<V> vars;
    for (auto& p : inputs) vars.push_back(probe.parameter(p));
    const V out = op(probe, vars);
    weight = random_matrix(out.rows(), out.cols(), rng);
  }
  {
    ad::Tape<double> tape;
    std::vector<V> vars;
    for (auto& p : inputs) vars.push_back(tape.parameter(p));
    const V out = op(tape, vars);
    tape.backward(ad::sum(ad::hadamard(out, tape.constant(weight))));
  }
  const double h = 1e-6;
  for (auto& p : inputs) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value(i);
      p.value(i) = orig + h;
      const double up = evaluate(op, inputs, weight);
      p.value(i) = orig - h;
      const double down = evaluate(op, inputs, weight);
      p.value(i) = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(p.grad(i), fd, tol * std::max(1.0, std::abs(fd))) << p.name << "[" << i << "]";
    }
  }
}

}  // namespace

TEST(Autodiff, ElementwiseAndLinearOps) {
  std::mt19937_64 rng(1);
  const M a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng), c = random_matrix(4, 2, rng);
  const M row = random_matrix(1, 4, rng);
  check_gradient([](auto&, auto& v) { return v[0] + v[1]; }, {a, b});
  check_gradient([](auto&, auto& v) { return v[0] - v[1] * 0.5; }, {a, b});
  check_gradient([](auto&, auto& v) { return -ad::hadamard(v[0], v[1]); }, {a, b});
  check_gradient([](auto&, auto& v) { return ad::matmul(v[0], v[1]); }, {a, c});
  check_gradient([](auto&, auto& v) { return ad::matmul_nt(v[0], v[1]); }, {a, b});
  check_gradient([](auto&, auto& v) { return ad::transpose(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::add_row(v[0], v[1]); }, {a, row});
  check_gradient([](auto&, auto& v) { return ad::broadcast_rows(v[0], 5); }, {row});
  check_gradient([](auto&, auto& v) { return ad::affine_scalar(v[0], 0.7, v[1]); }, {row, row * 2.0});
}

TEST(Autodiff, NonlinearOps) {
  std::mt19937_64 rng(2);
  const M a = random_matrix(3, 4, rng, -2.0, 2.0);
  const M pos = random_matrix(3, 4, rng, 0.5, 2.0);
  check_gradient([](auto&, auto& v) { return ad::gelu(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::sigmoid(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::cos(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::pow(v[0], -0.5); }, {pos});
  check_gradient([](auto&, auto& v) { return ad::pow(v[0], -1.0); }, {pos});
  // Entries stay away from the floor so the kink is not straddled.
  check_gradient([](auto&, auto& v) { return ad::clamp_min(v[0], 0.1); }, {a + M::Constant(3, 4, 0.05)});
}

TEST(Autodiff, ReductionsAndIndexing) {
  std::mt19937_64 rng(3);
  const M a = random_matrix(4, 3, rng), b = random_matrix(2, 3, rng), sq = random_matrix(3, 3, rng);
  check_gradient([](auto&, auto& v) { return ad::sum(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::sum_rows(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::mean_rows(v[0]); }, {a});
  check_gradient([](auto&, auto& v) { return ad::select_rows(v[0], {3, 0, 3}); }, {a});
  check_gradient([](auto&, auto& v) { return ad::col_block(v[0], 1, 2); }, {a});
  check_gradient([](auto&, auto& v) { return ad::vstack<double>({v[0], v[1]}); }, {a, b});
  check_gradient([](auto&, auto& v) { return ad::hstack<double>({v[0], v[1]}); }, {sq, random_matrix(3, 2, rng)});
  check_gradient([](auto&, auto& v) { return ad::diagonal(v[0]); }, {sq});
  check_gradient([](auto&, auto& v) { return ad::identity_minus(v[0]); }, {sq});
}

TEST(Autodiff, ScalingAndScatter) {
  std::mt19937_64 rng(4);
  const M a = random_matrix(4, 3, rng), col = random_matrix(4, 1, rng), row = random_matrix(1, 3, rng);
  check_gradient([](auto&, auto& v) { return ad::scale_rows(v[0], v[1]); }, {a, col});
  check_gradient([](auto&, auto& v) { return ad::scale_cols(v[0], v[1]); }, {a, row});
  const M c0 = random_matrix(3, 1, rng), c1 = random_matrix(2, 1, rng);
  check_gradient([](auto&, auto& v) { return ad::scatter_columns<double>(5, {v[0], v[1]}, {{0, 2, 4}, {1, 2}}); },
                 {c0, c1});
  M mask(4, 3);
  mask << 2, 0, 2, 0, 2, 2, 2, 2, 0, 0, 0, 2;
  check_gradient([mask](auto&, auto& v) { return ad::apply_mask(v[0], mask); }, {a});
}

TEST(Autodiff, AttentionOps) {
  std::mt19937_64 rng(5);
  const M q = random_matrix(1, 8, rng), keys = random_matrix(5, 8, rng);
  for (int heads : {1, 2, 4})
    check_gradient([heads](auto&, auto& v) { return ad::multihead_attention_weights(v[0], v[1], heads); },
                   {q, keys});
  const M x = random_matrix(4, 8, rng), y = random_matrix(4, 8, rng), z = random_matrix(4, 8, rng);
  for (int heads : {1, 2})
    check_gradient([heads](auto&, auto& v) { return ad::multihead_self_attention(v[0], v[1], v[2], heads); },
                   {x, y, z});
}

TEST(Autodiff, WeightedBce) {
  std::mt19937_64 rng(6);
  const M z = random_matrix(5, 1, rng, -3.0, 3.0);
  M target(5, 1), weight(5, 1);
  target << 1, 0, 1, 0, 0;
  weight << 1, 1, 0, 2, 1;
  check_gradient([&](auto&, auto& v) { return ad::weighted_bce_with_logits_sum(v[0], target, weight); }, {z});

  ad::Tape<double> tape(false);
  const double got = ad::weighted_bce_with_logits_sum(tape.constant(z), target, weight).scalar();
  double oracle = 0.0;
  for (int i = 0; i < 5; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z(i)));
    oracle -= weight(i) * (target(i) * std::log(p) + (1 - target(i)) * std::log(1 - p));
  }
  EXPECT_NEAR(got, oracle, 1e-12);
}

TEST(Autodiff, AttentionWeightsAreDistributions) {
  std::mt19937_64 rng(7);
  ad::Tape<double> tape(false);
  const V w = ad::multihead_attention_weights(tape.constant(random_matrix(1, 8, rng)),
                                              tape.constant(random_matrix(6, 8, rng)), 4);
  EXPECT_NEAR(w.value().sum(), 1.0, 1e-12);
  EXPECT_GT(w.value().minCoeff(), 0.0);
}

TEST(Autodiff, UnusedParameterHasZeroGradient) {
  Parameter<double> used{"used", M::Constant(2, 2, 0.5), {}}, unused{"unused", M::Constant(2, 2, 1.0), {}};
  used.zero_grad();
  unused.zero_grad();
  ad::Tape<double> tape;
  V u = tape.parameter(used);
  tape.parameter(unused);
  tape.backward(ad::sum(ad::gelu(u)));
  EXPECT_EQ(unused.grad, M::Zero(2, 2));
  EXPECT_GT(used.grad.cwiseAbs().minCoeff(), 0.0);
}

TEST(Autodiff, SeedScalesGradientsLinearly) {
  std::mt19937_64 rng(8);
  Parameter<double> p{"p", random_matrix(3, 3, rng), {}};
  auto grad_with_seed = [&](double seed) {
    p.zero_grad();
    ad::Tape<double> tape;
    V v = tape.parameter(p);
    tape.backward(ad::sum(ad::sigmoid(ad::matmul(v, v))), seed);
    return M(p.grad);
  };
  const M g1 = grad_with_seed(1.0), g2 = grad_with_seed(2.0);
  EXPECT_LE((g2 - 2.0 * g1).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Autodiff, TapeErrors) {
  ad::Tape<double> empty;
  ad::Tape<double> other;
  V foreign = other.scalar(1.0);
  try {
    empty.backward(foreign);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoRecordedForward);
  }
  ad::Tape<double> tape;
  V m = tape.constant(M::Ones(2, 2));
  try {
    tape.backward(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(Autodiff, ParameterGradientsAccumulateAcrossTapes) {
  Parameter<double> p{"p", M::Constant(1, 1, 2.0), {}};
  p.zero_grad();
  for (int k = 0; k < 2; ++k) {
    ad::Tape<double> tape;
    V v = tape.parameter(p);
    tape.backward(ad::sum(ad::hadamard(v, v)));
  }
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 8.0);
}
