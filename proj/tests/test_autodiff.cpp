// Copyright 2026 The dpmld Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "dpmld/autodiff.hpp"
#include "dpmld/errors.hpp"
#include "dpmld/random.hpp"

using namespace dpmld;
namespace ad = dpmld::ad;

namespace {

constexpr double kLn2 = 0.6931471805599453094172321;
constexpr double kLn1pe = 1.313261687518222834048996;  // -log sigmoid(-1)

using GraphFn =
    std::function<ad::Tensor(ad::Tape&, const ad::Tensor&)>;

double eval_loss(const GraphFn& fn, const std::vector<double>& x,
                 std::size_t rows, std::size_t cols) {
  ad::Tape tape;
  const ad::Tensor leaf = tape.leaf(rows, cols, x, false);
  return fn(tape, leaf).item();
}

// Central finite differences against the reverse-mode gradient,
// relative error below tol with an absolute floor for near-zero entries.
void check_grad(const GraphFn& fn, const std::vector<double>& x,
                std::size_t rows, std::size_t cols, double tol = 1e-4) {
  ad::Tape tape;
  const ad::Tensor leaf = tape.leaf(rows, cols, x, true);
  const ad::Tensor loss = fn(tape, leaf);
  tape.backward(loss);
  const std::vector<double> g = leaf.grad();
  REQUIRE(g.size() == x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = 1e-5 * std::max(1.0, std::fabs(x[i]));
    std::vector<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd =
        (eval_loss(fn, xp, rows, cols) - eval_loss(fn, xm, rows, cols)) /
        (2.0 * h);
    const double denom =
        std::max({std::fabs(fd), std::fabs(g[i]), 1e-6});
    INFO("index ", i, " analytic ", g[i], " fd ", fd);
    CHECK(std::fabs(fd - g[i]) / denom < tol);
  }
}

// Reduces an arbitrary tensor to a scalar with fixed non-uniform weights so
// every entry's gradient is distinct.
ad::Tensor weighted_sum(ad::Tape& tape, const ad::Tensor& y) {
  std::vector<double> w(y.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = 0.3 + 0.17 * static_cast<double>(i % 7) -
           0.05 * static_cast<double>(i % 3);
  }
  const ad::Tensor wt = tape.leaf(y.rows(), y.cols(), w, false);
  return ad::sum(ad::mul(y, wt));
}

std::vector<double> random_vec(std::size_t n, RandomStream& rng, double lo,
                               double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}

}  // namespace

TEST_CASE("forward values of the basic ops") {
  ad::Tape tape;
  const ad::Tensor a = tape.leaf(1, 4, {0.0, 0.0, 0.0, 0.0}, false);
  const auto sm = ad::softmax(a, 1);
  for (std::size_t j = 0; j < 4; ++j) CHECK(sm.at(0, j) == 0.25);

  const ad::Tensor eye = tape.leaf(2, 2, {1.0, 0.0, 0.0, 1.0}, false);
  const ad::Tensor m = tape.leaf(2, 2, {1.0, 2.0, 3.0, 4.0}, false);
  const auto prod = ad::matmul(eye, m);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(prod.at(i, j) == m.at(i, j));
    }
  }

  const ad::Tensor t = tape.leaf(2, 3, {1, 2, 3, 4, 5, 6}, false);
  const auto tr = ad::transpose(t);
  CHECK(tr.rows() == 3);
  CHECK(tr.at(0, 1) == 4.0);
  CHECK(tr.at(2, 0) == 3.0);

  const auto rs = ad::reshape(t, 3, 2);
  CHECK(rs.at(2, 1) == 6.0);

  const auto sl = ad::slice(t, 0, 2, 1, 3);
  CHECK(sl.rows() == 2);
  CHECK(sl.cols() == 2);
  CHECK(sl.at(1, 0) == 5.0);

  const auto cat = ad::concat({t, t}, 0);
  CHECK(cat.rows() == 4);
  CHECK(cat.at(3, 2) == 6.0);
  const auto cat1 = ad::concat({t, t}, 1);
  CHECK(cat1.cols() == 6);
  CHECK(cat1.at(1, 5) == 6.0);
}

TEST_CASE("gradient of sum(x*x) is 2x") {
  ad::Tape tape;
  const ad::Tensor x = tape.leaf(1, 2, {1.0, 2.0}, true);
  const ad::Tensor loss = ad::sum(ad::mul(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("shared subexpressions accumulate once per use") {
  ad::Tape tape;
  const ad::Tensor x = tape.leaf(1, 2, {3.0, -1.5}, true);
  const ad::Tensor y = ad::mul(x, x);
  const ad::Tensor loss = ad::sum(ad::add(y, y));
  tape.backward(loss);
  CHECK(x.grad()[0] == 4.0 * 3.0);
  CHECK(x.grad()[1] == 4.0 * -1.5);
}

TEST_CASE("backward guards") {
  ad::Tape tape;
  const ad::Tensor x = tape.leaf(2, 2, {1, 2, 3, 4}, true);
  const ad::Tensor y = ad::mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ConfigError);  // non-scalar
  const ad::Tensor loss = ad::sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ConfigError);  // second call
}

TEST_CASE("constant loss leaves gradients at zero") {
  ad::Tape tape;
  const ad::Tensor x = tape.leaf(1, 3, {1.0, 2.0, 3.0}, true);
  (void)ad::mul(x, x);
  const ad::Tensor loss = tape.scalar(5.0);
  tape.backward(loss);
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("shape and tape mismatches are rejected with diagnostics") {
  ad::Tape tape, other;
  const ad::Tensor a = tape.leaf(2, 2, {1, 2, 3, 4}, false);
  const ad::Tensor b = tape.leaf(1, 2, {1, 2}, false);
  const ad::Tensor c = other.leaf(2, 2, {1, 2, 3, 4}, false);
  CHECK_THROWS_AS(ad::add(a, b), ConfigError);
  CHECK_THROWS_AS(ad::add(a, c), ConfigError);
  CHECK_THROWS_AS(ad::matmul(a, b), ConfigError);
  CHECK_THROWS_AS(ad::reshape(a, 3, 3), ConfigError);
  CHECK_THROWS_AS(ad::slice(a, 0, 3, 0, 2), ConfigError);
  CHECK_THROWS_AS(ad::softmax(a, 2), ConfigError);
  CHECK_THROWS_AS(ad::cross_entropy(a, {0, 2}), ConfigError);
  CHECK_THROWS_AS(ad::cross_entropy(a, {0}), ConfigError);
}

TEST_CASE("softmax rows are stochastic") {
  RandomStream rng(42);
  ad::Tape tape;
  const auto v = random_vec(5 * 7, rng, -4.0, 4.0);
  const ad::Tensor x = tape.leaf(5, 7, v, false);
  const auto y = ad::softmax(x, 1);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += y.at(i, j);
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }
  const auto y0 = ad::softmax(x, 0);
  for (std::size_t j = 0; j < 7; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 5; ++i) s += y0.at(i, j);
    CHECK(std::fabs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("cross entropy hits known values") {
  ad::Tape tape;
  const ad::Tensor equal = tape.leaf(3, 2, {0, 0, 1, 1, -2, -2}, false);
  CHECK(ad::cross_entropy(equal, {0, 1, 0}).item() ==
        doctest::Approx(kLn2).epsilon(1e-12));

  const ad::Tensor one = tape.leaf(1, 2, {1.0, 0.0}, false);
  CHECK(ad::cross_entropy(one, {1}).item() ==
        doctest::Approx(kLn1pe).epsilon(1e-12));

  const ad::Tensor margin = tape.leaf(1, 2, {30.0, 0.0}, false);
  CHECK(ad::cross_entropy(margin, {0}).item() < 1e-9);
}

TEST_CASE("clamp gradient is inclusive at the boundary") {
  ad::Tape tape;
  const ad::Tensor x = tape.leaf(1, 3, {-0.5, 0.0, 0.5}, true);
  const ad::Tensor loss = ad::sum(ad::clamp(x, 0.0, 1.0));
  tape.backward(loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("finite differences: element-wise and scalar ops") {
  RandomStream rng(42);
  const auto x = random_vec(6, rng, -1.0, 1.0);
  const auto pos = random_vec(6, rng, 0.3, 2.0);
  const auto other = random_vec(6, rng, 0.5, 1.5);

  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, other, false);
        return weighted_sum(t, ad::add(v, o));
      },
      x, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, other, false);
        return weighted_sum(t, ad::sub(v, o));
      },
      x, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, other, false);
        return weighted_sum(t, ad::mul(v, o));
      },
      x, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, other, false);
        return weighted_sum(t, ad::div(v, o));
      },
      x, 2, 3);
  // Denominator side of div.
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, other, false);
        return weighted_sum(t, ad::div(o, v));
      },
      pos, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::add_scalar(v, 1.7));
      },
      x, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::mul_scalar(v, -2.3));
      },
      x, 2, 3);
}

TEST_CASE("finite differences: unary maps") {
  RandomStream rng(7);
  const auto x = random_vec(6, rng, -1.5, 1.5);
  const auto pos = random_vec(6, rng, 0.2, 3.0);
  check_grad([](ad::Tape& t, const ad::Tensor& v) {
    return weighted_sum(t, ad::exp(v));
  }, x, 2, 3);
  check_grad([](ad::Tape& t, const ad::Tensor& v) {
    return weighted_sum(t, ad::log(v));
  }, pos, 3, 2);
  check_grad([](ad::Tape& t, const ad::Tensor& v) {
    return weighted_sum(t, ad::sigmoid(v));
  }, x, 2, 3);
  check_grad([](ad::Tape& t, const ad::Tensor& v) {
    return weighted_sum(t, ad::tanh(v));
  }, x, 2, 3);
  // Clamp away from its kinks.
  check_grad([](ad::Tape& t, const ad::Tensor& v) {
    return weighted_sum(t, ad::clamp(v, -1.0, 1.0));
  }, random_vec(6, rng, -0.9, 0.9), 2, 3);
}

TEST_CASE("finite differences: bias row") {
  RandomStream rng(11);
  const auto a = random_vec(8, rng, -1.0, 1.0);
  const auto b = random_vec(4, rng, -1.0, 1.0);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor bias = t.leaf(1, 4, b, false);
        return weighted_sum(t, ad::add_rowvec(v, bias));
      },
      a, 2, 4);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor base = t.leaf(2, 4, a, false);
        return weighted_sum(t, ad::add_rowvec(base, v));
      },
      b, 1, 4);
}

TEST_CASE("finite differences: matmul both sides, transpose, reshape") {
  RandomStream rng(13);
  const auto a = random_vec(2 * 3, rng, -1.0, 1.0);
  const auto b = random_vec(3 * 4, rng, -1.0, 1.0);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor rhs = t.leaf(3, 4, b, false);
        return weighted_sum(t, ad::matmul(v, rhs));
      },
      a, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor lhs = t.leaf(2, 3, a, false);
        return weighted_sum(t, ad::matmul(lhs, v));
      },
      b, 3, 4);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::transpose(v));
      },
      a, 2, 3);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::reshape(v, 3, 2));
      },
      a, 2, 3);
}

TEST_CASE("finite differences: concat and slice") {
  RandomStream rng(17);
  const auto a = random_vec(6, rng, -1.0, 1.0);
  const auto b = random_vec(6, rng, -1.0, 1.0);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, b, false);
        return weighted_sum(t, ad::concat({v, o, v}, 0));
      },
      a, 2, 3);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor o = t.leaf(2, 3, b, false);
        return weighted_sum(t, ad::concat({o, v}, 1));
      },
      a, 2, 3);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::slice(v, 1, 3, 0, 2));
      },
      random_vec(12, rng, -1.0, 1.0), 4, 3);
}

TEST_CASE("finite differences: softmax, layer norm, reductions") {
  RandomStream rng(19);
  const auto x = random_vec(12, rng, -2.0, 2.0);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::softmax(v, 1));
      },
      x, 3, 4);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::softmax(v, 0));
      },
      x, 3, 4);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::layer_normalize(v));
      },
      x, 3, 4);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) { return ad::sum(v); }, x, 3, 4);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) { return ad::mean(v); }, x, 3, 4);
  check_grad(
      [](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::block_mean_rows(v, 2));
      },
      x, 6, 2);
}

TEST_CASE("block_mean_rows averages row blocks") {
  ad::Tape tape;
  const ad::Tensor x =
      tape.leaf(4, 2, {1, 2, 3, 4, 10, 20, 30, 40}, false);
  const auto y = ad::block_mean_rows(x, 2);
  CHECK(y.rows() == 2);
  CHECK(y.at(0, 0) == 2.0);
  CHECK(y.at(0, 1) == 3.0);
  CHECK(y.at(1, 0) == 20.0);
  CHECK(y.at(1, 1) == 30.0);
}

TEST_CASE("finite differences: embedding with repeated ids") {
  RandomStream rng(23);
  const auto table = random_vec(5 * 3, rng, -1.0, 1.0);
  const std::vector<int> ids{0, 2, 2, 4, 1};
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        return weighted_sum(t, ad::embed(v, ids));
      },
      table, 5, 3);
  ad::Tape tape;
  const ad::Tensor tb = tape.leaf(5, 3, table, false);
  const auto e = ad::embed(tb, ids);
  CHECK(e.rows() == 5);
  CHECK(e.at(1, 0) == tb.at(2, 0));
  CHECK(e.at(2, 0) == tb.at(2, 0));
  CHECK_THROWS_AS(ad::embed(tb, {5}), ConfigError);
  CHECK_THROWS_AS(ad::embed(tb, {-1}), ConfigError);
}

TEST_CASE("finite differences: grouped attention primitives") {
  RandomStream rng(29);
  const std::size_t groups = 2, q_len = 2, k_len = 3, d = 4;
  const auto q = random_vec(groups * q_len * d, rng, -1.0, 1.0);
  const auto k = random_vec(groups * k_len * d, rng, -1.0, 1.0);
  const auto aw = random_vec(groups * q_len * k_len, rng, 0.1, 1.0);
  const auto vv = random_vec(groups * k_len * d, rng, -1.0, 1.0);

  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor kk = t.leaf(groups * k_len, d, k, false);
        return weighted_sum(t, ad::grouped_attn_scores(v, kk, q_len, k_len));
      },
      q, groups * q_len, d);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor qq = t.leaf(groups * q_len, d, q, false);
        return weighted_sum(t, ad::grouped_attn_scores(qq, v, q_len, k_len));
      },
      k, groups * k_len, d);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor val = t.leaf(groups * k_len, d, vv, false);
        return weighted_sum(t, ad::grouped_attn_apply(v, val, q_len, k_len));
      },
      aw, groups * q_len, k_len);
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        const ad::Tensor a = t.leaf(groups * q_len, k_len, aw, false);
        return weighted_sum(t, ad::grouped_attn_apply(a, v, q_len, k_len));
      },
      vv, groups * k_len, d);
}

TEST_CASE("grouped attention blocks do not mix samples") {
  // Two stacked samples; zeroing sample 2's keys must not change sample 1's
  // scores, which a plain matmul over the stacked matrix would violate.
  RandomStream rng(31);
  const std::size_t q_len = 2, k_len = 3, d = 4;
  const auto q = random_vec(2 * q_len * d, rng, -1.0, 1.0);
  auto k = random_vec(2 * k_len * d, rng, -1.0, 1.0);

  ad::Tape t1;
  const auto s1 = ad::grouped_attn_scores(t1.leaf(2 * q_len, d, q, false),
                                          t1.leaf(2 * k_len, d, k, false),
                                          q_len, k_len);
  for (std::size_t i = k_len * d; i < 2 * k_len * d; ++i) k[i] = 0.0;
  ad::Tape t2;
  const auto s2 = ad::grouped_attn_scores(t2.leaf(2 * q_len, d, q, false),
                                          t2.leaf(2 * k_len, d, k, false),
                                          q_len, k_len);
  for (std::size_t r = 0; r < q_len; ++r) {
    for (std::size_t c = 0; c < k_len; ++c) {
      CHECK(s1.at(r, c) == s2.at(r, c));            // sample 1 untouched
    }
  }
  for (std::size_t r = q_len; r < 2 * q_len; ++r) {
    for (std::size_t c = 0; c < k_len; ++c) {
      CHECK(s2.at(r, c) == 0.0);                    // sample 2 zeroed
    }
  }
}

TEST_CASE("finite differences: cross entropy") {
  RandomStream rng(37);
  const auto logits = random_vec(4 * 2, rng, -2.0, 2.0);
  const std::vector<int> labels{0, 1, 1, 0};
  check_grad(
      [&](ad::Tape& t, const ad::Tensor& v) {
        return ad::cross_entropy(v, labels);
      },
      logits, 4, 2);
}

TEST_CASE("finite differences: twenty random composite graphs") {
  RandomStream rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 2 + static_cast<std::size_t>(rng.uniform() * 3);
    const std::size_t cols = 2 + static_cast<std::size_t>(rng.uniform() * 3);
    const auto x = random_vec(rows * cols, rng, -1.0, 1.0);
    const auto w = random_vec(cols * cols, rng, -0.7, 0.7);
    const int pick1 = static_cast<int>(rng.uniform() * 4.0);
    const int pick2 = static_cast<int>(rng.uniform() * 4.0);
    const GraphFn fn = [&, pick1, pick2](ad::Tape& t, const ad::Tensor& v) {
      const ad::Tensor wt = t.leaf(cols, cols, w, false);
      ad::Tensor h = ad::matmul(v, wt);
      switch (pick1) {
        case 0: h = ad::sigmoid(h); break;
        case 1: h = ad::tanh(h); break;
        case 2: h = ad::softmax(h, 1); break;
        default: h = ad::layer_normalize(h); break;
      }
      ad::Tensor g = ad::add(h, v);  // residual reuses the leaf
      switch (pick2) {
        case 0: g = ad::mul(g, h); break;
        case 1: g = ad::exp(ad::mul_scalar(g, 0.5)); break;
        case 2: g = ad::sigmoid(g); break;
        default: g = ad::add_scalar(ad::tanh(g), 0.3); break;
      }
      return weighted_sum(t, g);
    };
    check_grad(fn, x, rows, cols);
  }
}
