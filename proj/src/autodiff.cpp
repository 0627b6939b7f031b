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

#include "dpmld/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "dpmld/errors.hpp"
#include "dpmld/kernels.hpp"

namespace dpmld::ad {

namespace {

// Kernels below this many multiply-adds run serially even under a parallel
// policy; results are bit-identical either way, this is only a perf knob.
constexpr std::size_t kParallelMacThreshold = 32768;

ExecPolicy effective(const ExecPolicy& policy, std::size_t macs) {
  return macs >= kParallelMacThreshold ? policy : ExecPolicy{1};
}

}  // namespace

void mm_nn(const double* a, const double* b, double* c, std::size_t n,
           std::size_t k, std::size_t m, const ExecPolicy& policy) {
  parallel_for(n, effective(policy, n * k * m), [&](std::size_t i) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = ai[kk];
      const double* bk = b + kk * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bk[j];
    }
  });
}

void mm_nt(const double* a, const double* b, double* c, std::size_t n,
           std::size_t k, std::size_t m, const ExecPolicy& policy) {
  parallel_for(n, effective(policy, n * k * m), [&](std::size_t i) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
      ci[j] += s;
    }
  });
}

void mm_tn(const double* a, const double* b, double* c, std::size_t n,
           std::size_t k, std::size_t m, const ExecPolicy& policy) {
  parallel_for(k, effective(policy, n * k * m), [&](std::size_t kk) {
    double* ck = c + kk * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = a[i * k + kk];
      const double* bi = b + i * m;
      for (std::size_t j = 0; j < m; ++j) ck[j] += av * bi[j];
    }
  });
}

void gmm_nt(const double* x, const double* y, double* s, std::size_t groups,
            std::size_t p, std::size_t q, std::size_t d,
            const ExecPolicy& policy) {
  parallel_for(groups * p, effective(policy, groups * p * q * d),
               [&](std::size_t row) {
                 const std::size_t g = row / p;
                 const double* xr = x + row * d;
                 const double* yg = y + g * q * d;
                 double* sr = s + row * q;
                 for (std::size_t c = 0; c < q; ++c) {
                   const double* yc = yg + c * d;
                   double acc = 0.0;
                   for (std::size_t e = 0; e < d; ++e) acc += xr[e] * yc[e];
                   sr[c] += acc;
                 }
               });
}

void gmm_nn(const double* x, const double* y, double* o, std::size_t groups,
            std::size_t p, std::size_t q, std::size_t d,
            const ExecPolicy& policy) {
  parallel_for(groups * p, effective(policy, groups * p * q * d),
               [&](std::size_t row) {
                 const std::size_t g = row / p;
                 const double* xr = x + row * q;
                 const double* yg = y + g * q * d;
                 double* orow = o + row * d;
                 for (std::size_t c = 0; c < q; ++c) {
                   const double xv = xr[c];
                   const double* yc = yg + c * d;
                   for (std::size_t e = 0; e < d; ++e) orow[e] += xv * yc[e];
                 }
               });
}

void gmm_tn(const double* x, const double* y, double* o, std::size_t groups,
            std::size_t p, std::size_t q, std::size_t d,
            const ExecPolicy& policy) {
  parallel_for(groups * q, effective(policy, groups * p * q * d),
               [&](std::size_t row) {
                 const std::size_t g = row / q;
                 const std::size_t c = row % q;
                 double* orow = o + row * d;
                 for (std::size_t r = 0; r < p; ++r) {
                   const double xv = x[(g * p + r) * q + c];
                   const double* yr = y + (g * p + r) * d;
                   for (std::size_t e = 0; e < d; ++e) orow[e] += xv * yr[e];
                 }
               });
}

// Internal access for the op builders defined below.
class OpBuilder {
 public:
  static int push_node(Tape& t, std::size_t rows, std::size_t cols,
                       std::vector<double> value, bool needs_grad) {
    Tape::Node n;
    n.rows = rows;
    n.cols = cols;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.grad.assign(n.value.size(), 0.0);
    return t.push(std::move(n));
  }
  static void set_backward(Tape& t, int id, std::function<void()> bw) {
    t.node(id).backward = std::move(bw);
  }
  static std::vector<double>& grad(Tape& t, int id) { return t.node(id).grad; }
  static const std::vector<double>& value(Tape& t, int id) {
    return t.node(id).value;
  }
  static bool needs(Tape& t, int id) { return t.node(id).needs_grad; }
};

namespace {

std::string shape_str(const Tensor& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

void check_bound(const Tensor& a, const char* op) {
  if (a.tape == nullptr || a.id < 0) {
    throw ConfigError(std::string(op) + ": tensor not bound to a tape");
  }
}

void check_same_tape(const Tensor& a, const Tensor& b, const char* op) {
  check_bound(a, op);
  check_bound(b, op);
  if (a.tape != b.tape) {
    throw ConfigError(std::string(op) + ": operands from different tapes");
  }
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) +
                      " vs " + shape_str(b));
  }
}

Tensor finish(Tape& t, std::size_t rows, std::size_t cols,
              std::vector<double> value, bool needs_grad,
              const std::function<std::function<void()>(int)>& make_bw) {
  const int id = OpBuilder::push_node(t, rows, cols, std::move(value),
                                      needs_grad);
  if (needs_grad) OpBuilder::set_backward(t, id, make_bw(id));
  return Tensor{&t, id};
}

// Element-wise binary op scaffold.
template <typename Fwd, typename Bwd>
Tensor ew_binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd,
                 Bwd bwd) {
  check_same_tape(a, b, op);
  check_same_shape(a, b, op);
  Tape& t = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  const bool ng = a.needs_grad() || b.needs_grad();
  Tape* tp = &t;
  const int aid = a.id, bid = b.id;
  return finish(t, a.rows(), a.cols(), std::move(out), ng, [=](int oid) {
    return [tp, aid, bid, oid, bwd]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      const auto& av2 = OpBuilder::value(*tp, aid);
      const auto& bv2 = OpBuilder::value(*tp, bid);
      const auto& ov2 = OpBuilder::value(*tp, oid);
      const bool na = OpBuilder::needs(*tp, aid);
      const bool nb = OpBuilder::needs(*tp, bid);
      auto* ga = na ? &OpBuilder::grad(*tp, aid) : nullptr;
      auto* gb = nb ? &OpBuilder::grad(*tp, bid) : nullptr;
      for (std::size_t i = 0; i < g.size(); ++i) {
        bwd(g[i], av2[i], bv2[i], ov2[i], ga ? &(*ga)[i] : nullptr,
            gb ? &(*gb)[i] : nullptr);
      }
    };
  });
}

// Element-wise unary op scaffold; bwd(gy, x, y, &gx).
template <typename Fwd, typename Bwd>
Tensor ew_unary(const Tensor& a, const char* op, Fwd fwd, Bwd bwd) {
  check_bound(a, op);
  Tape& t = *a.tape;
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, a.rows(), a.cols(), std::move(out), a.needs_grad(),
                [=](int oid) {
                  return [tp, aid, oid, bwd]() {
                    const auto& g = OpBuilder::grad(*tp, oid);
                    const auto& av2 = OpBuilder::value(*tp, aid);
                    const auto& ov2 = OpBuilder::value(*tp, oid);
                    auto& ga = OpBuilder::grad(*tp, aid);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      bwd(g[i], av2[i], ov2[i], &ga[i]);
                    }
                  };
                });
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t Tensor::rows() const { return tape->node(id).rows; }
std::size_t Tensor::cols() const { return tape->node(id).cols; }
std::size_t Tensor::size() const { return tape->node(id).value.size(); }
const std::vector<double>& Tensor::value() const {
  return tape->node(id).value;
}
const std::vector<double>& Tensor::grad() const {
  const auto& n = tape->node(id);
  if (!n.needs_grad) {
    throw ConfigError("grad requested on a tensor without needs_grad");
  }
  return n.grad;
}
bool Tensor::needs_grad() const { return tape->node(id).needs_grad; }
double Tensor::item() const {
  const auto& n = tape->node(id);
  if (n.value.size() != 1) {
    throw ConfigError("item() requires a 1x1 tensor, got " +
                      std::to_string(n.rows) + "x" + std::to_string(n.cols));
  }
  return n.value[0];
}
double Tensor::at(std::size_t r, std::size_t c) const {
  const auto& n = tape->node(id);
  if (r >= n.rows || c >= n.cols) throw ConfigError("at(): index out of range");
  return n.value[r * n.cols + c];
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::leaf(std::size_t rows, std::size_t cols, const double* values,
                  bool needs_grad) {
  if (rows == 0 || cols == 0) throw ConfigError("leaf: empty shape");
  std::vector<double> v(values, values + rows * cols);
  const int id = OpBuilder::push_node(*this, rows, cols, std::move(v),
                                      needs_grad);
  return Tensor{this, id};
}

Tensor Tape::leaf(std::size_t rows, std::size_t cols,
                  const std::vector<double>& values, bool needs_grad) {
  if (values.size() != rows * cols) {
    throw ConfigError("leaf: value count " + std::to_string(values.size()) +
                      " does not match " + std::to_string(rows) + "x" +
                      std::to_string(cols));
  }
  return leaf(rows, cols, values.data(), needs_grad);
}

Tensor Tape::constant(std::size_t rows, std::size_t cols, double fill) {
  if (rows == 0 || cols == 0) throw ConfigError("constant: empty shape");
  std::vector<double> v(rows * cols, fill);
  const int id = OpBuilder::push_node(*this, rows, cols, std::move(v), false);
  return Tensor{this, id};
}

Tensor Tape::scalar(double v) { return constant(1, 1, v); }

void Tape::backward(const Tensor& loss) {
  if (loss.tape != this) throw ConfigError("backward: loss from another tape");
  if (backward_done_) {
    throw ConfigError(
        "backward already ran on this tape; record a fresh graph");
  }
  const Node& ln = node(loss.id);
  if (ln.value.size() != 1) {
    throw ConfigError("backward: loss must be scalar, got " +
                      std::to_string(ln.rows) + "x" + std::to_string(ln.cols));
  }
  backward_done_ = true;
  if (!ln.needs_grad) return;  // constant loss: every gradient stays zero
  node(loss.id).grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = node(i);
    if (n.needs_grad && n.backward) n.backward();
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return ew_binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double g, double x, double y, double, double* ga, double* gb) {
        if (ga) *ga += g / y;
        if (gb) *gb -= g * x / (y * y);
      });
}

Tensor add_scalar(const Tensor& a, double c) {
  return ew_unary(
      a, "add_scalar", [c](double x) { return x + c; },
      [](double g, double, double, double* gx) { *gx += g; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return ew_unary(
      a, "mul_scalar", [c](double x) { return x * c; },
      [c](double g, double, double, double* gx) { *gx += g * c; });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b, "add_rowvec");
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ConfigError("add_rowvec: bias must be 1x" +
                      std::to_string(a.cols()) + ", got " + shape_str(b));
  }
  Tape& t = *a.tape;
  const auto& av = a.value();
  const auto& bv = b.value();
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i * m + j] + bv[j];
  }
  Tape* tp = &t;
  const int aid = a.id, bid = b.id;
  return finish(t, n, m, std::move(out), a.needs_grad() || b.needs_grad(),
                [=](int oid) {
                  return [tp, aid, bid, oid, n, m]() {
                    const auto& g = OpBuilder::grad(*tp, oid);
                    if (OpBuilder::needs(*tp, aid)) {
                      auto& ga = OpBuilder::grad(*tp, aid);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (OpBuilder::needs(*tp, bid)) {
                      auto& gb = OpBuilder::grad(*tp, bid);
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < m; ++j) {
                          gb[j] += g[i * m + j];
                        }
                      }
                    }
                  };
                });
}

Tensor exp(const Tensor& a) {
  return ew_unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double g, double, double y, double* gx) { *gx += g * y; });
}

Tensor log(const Tensor& a) {
  return ew_unary(
      a, "log", [](double x) { return std::log(x); },
      [](double g, double x, double, double* gx) { *gx += g / x; });
}

Tensor sigmoid(const Tensor& a) {
  return ew_unary(
      a, "sigmoid", [](double x) { return stable_sigmoid(x); },
      [](double g, double, double y, double* gx) { *gx += g * y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return ew_unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double g, double, double y, double* gx) {
        *gx += g * (1.0 - y * y);
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ConfigError("clamp: lo > hi");
  return ew_unary(
      a, "clamp",
      [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double g, double x, double, double* gx) {
        if (x >= lo && x <= hi) *gx += g;
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimensions differ, " + shape_str(a) +
                      " vs " + shape_str(b));
  }
  Tape& t = *a.tape;
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  mm_nn(a.value().data(), b.value().data(), out.data(), n, k, m, t.policy());
  Tape* tp = &t;
  const int aid = a.id, bid = b.id;
  return finish(t, n, m, std::move(out), a.needs_grad() || b.needs_grad(),
                [=](int oid) {
                  return [tp, aid, bid, oid, n, k, m]() {
                    const auto& g = OpBuilder::grad(*tp, oid);
                    const auto& av = OpBuilder::value(*tp, aid);
                    const auto& bv = OpBuilder::value(*tp, bid);
                    if (OpBuilder::needs(*tp, aid)) {
                      mm_nt(g.data(), bv.data(),
                            OpBuilder::grad(*tp, aid).data(), n, m, k,
                            tp->policy());
                    }
                    if (OpBuilder::needs(*tp, bid)) {
                      mm_tn(av.data(), g.data(),
                            OpBuilder::grad(*tp, bid).data(), n, k, m,
                            tp->policy());
                    }
                  };
                });
}

Tensor transpose(const Tensor& a) {
  check_bound(a, "transpose");
  Tape& t = *a.tape;
  const std::size_t n = a.rows(), m = a.cols();
  const auto& av = a.value();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  }
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, m, n, std::move(out), a.needs_grad(), [=](int oid) {
    return [tp, aid, oid, n, m]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      auto& ga = OpBuilder::grad(*tp, aid);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
      }
    };
  });
}

Tensor reshape(const Tensor& a, std::size_t rows, std::size_t cols) {
  check_bound(a, "reshape");
  if (rows * cols != a.size()) {
    throw ConfigError("reshape: cannot view " + shape_str(a) + " as (" +
                      std::to_string(rows) + "x" + std::to_string(cols) + ")");
  }
  Tape& t = *a.tape;
  std::vector<double> out = a.value();
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, rows, cols, std::move(out), a.needs_grad(), [=](int oid) {
    return [tp, aid, oid]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      auto& ga = OpBuilder::grad(*tp, aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ConfigError("concat: no operands");
  if (axis != 0 && axis != 1) throw ConfigError("concat: axis must be 0 or 1");
  for (const auto& p : parts) check_same_tape(parts[0], p, "concat");
  Tape& t = *parts[0].tape;
  std::size_t rows = 0, cols = 0;
  if (axis == 0) {
    cols = parts[0].cols();
    for (const auto& p : parts) {
      if (p.cols() != cols) {
        throw ConfigError("concat axis 0: column mismatch " + shape_str(p));
      }
      rows += p.rows();
    }
  } else {
    rows = parts[0].rows();
    for (const auto& p : parts) {
      if (p.rows() != rows) {
        throw ConfigError("concat axis 1: row mismatch " + shape_str(p));
      }
      cols += p.cols();
    }
  }
  std::vector<double> out(rows * cols);
  std::vector<int> ids;
  std::vector<std::size_t> offs;  // row offset (axis 0) or col offset (axis 1)
  std::vector<std::size_t> prows, pcols;
  std::size_t off = 0;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    offs.push_back(off);
    prows.push_back(p.rows());
    pcols.push_back(p.cols());
    const auto& pv = p.value();
    if (axis == 0) {
      std::copy(pv.begin(), pv.end(), out.begin() + off * cols);
      off += p.rows();
    } else {
      for (std::size_t i = 0; i < rows; ++i) {
        std::copy(pv.begin() + i * p.cols(), pv.begin() + (i + 1) * p.cols(),
                  out.begin() + i * cols + off);
      }
      off += p.cols();
    }
  }
  bool ng = false;
  for (const auto& p : parts) ng = ng || p.needs_grad();
  Tape* tp = &t;
  return finish(t, rows, cols, std::move(out), ng, [=](int oid) {
    return [tp, oid, ids, offs, prows, pcols, rows, cols, axis]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      for (std::size_t pi = 0; pi < ids.size(); ++pi) {
        if (!OpBuilder::needs(*tp, ids[pi])) continue;
        auto& gp = OpBuilder::grad(*tp, ids[pi]);
        if (axis == 0) {
          const std::size_t base = offs[pi] * cols;
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[base + i];
        } else {
          for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < pcols[pi]; ++j) {
              gp[i * pcols[pi] + j] += g[i * cols + offs[pi] + j];
            }
          }
        }
      }
    };
  });
}

Tensor slice(const Tensor& a, std::size_t r0, std::size_t r1, std::size_t c0,
             std::size_t c1) {
  check_bound(a, "slice");
  if (!(r0 < r1 && r1 <= a.rows() && c0 < c1 && c1 <= a.cols())) {
    throw ConfigError("slice: range [" + std::to_string(r0) + "," +
                      std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                      std::to_string(c1) + ") outside " + shape_str(a));
  }
  Tape& t = *a.tape;
  const std::size_t n = r1 - r0, m = c1 - c0, ac = a.cols();
  const auto& av = a.value();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = av[(r0 + i) * ac + c0 + j];
    }
  }
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, n, m, std::move(out), a.needs_grad(), [=](int oid) {
    return [tp, aid, oid, r0, c0, n, m, ac]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      auto& ga = OpBuilder::grad(*tp, aid);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          ga[(r0 + i) * ac + c0 + j] += g[i * m + j];
        }
      }
    };
  });
}

namespace {

// Softmax along contiguous stripes; axis handled by the caller via indexing.
void softmax_stripe(const double* x, double* y, std::size_t len,
                    std::size_t stride) {
  double mx = x[0];
  for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[i * stride]);
  double z = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    y[i * stride] = std::exp(x[i * stride] - mx);
    z += y[i * stride];
  }
  for (std::size_t i = 0; i < len; ++i) y[i * stride] /= z;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  check_bound(a, "softmax");
  if (axis != 0 && axis != 1) throw ConfigError("softmax: axis must be 0 or 1");
  Tape& t = *a.tape;
  const std::size_t n = a.rows(), m = a.cols();
  const auto& av = a.value();
  std::vector<double> out(n * m);
  if (axis == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      softmax_stripe(av.data() + i * m, out.data() + i * m, m, 1);
    }
  } else {
    for (std::size_t j = 0; j < m; ++j) {
      softmax_stripe(av.data() + j, out.data() + j, n, m);
    }
  }
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, n, m, std::move(out), a.needs_grad(), [=](int oid) {
    return [tp, aid, oid, n, m, axis]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      const auto& y = OpBuilder::value(*tp, oid);
      auto& ga = OpBuilder::grad(*tp, aid);
      const std::size_t stripes = axis == 1 ? n : m;
      const std::size_t len = axis == 1 ? m : n;
      const std::size_t stride = axis == 1 ? 1 : m;
      for (std::size_t s = 0; s < stripes; ++s) {
        const std::size_t base = axis == 1 ? s * m : s;
        double dot = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          dot += g[base + i * stride] * y[base + i * stride];
        }
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t ix = base + i * stride;
          ga[ix] += y[ix] * (g[ix] - dot);
        }
      }
    };
  });
}

Tensor layer_normalize(const Tensor& a) {
  check_bound(a, "layer_normalize");
  constexpr double kEps = 1e-5;
  Tape& t = *a.tape;
  const std::size_t n = a.rows(), m = a.cols();
  const auto& av = a.value();
  std::vector<double> out(n * m);
  std::vector<double> inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += av[i * m + j];
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = av[i * m + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv[i] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = (av[i * m + j] - mu) * inv[i];
    }
  }
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, n, m, std::move(out), a.needs_grad(), [=](int oid) {
    return [tp, aid, oid, n, m, inv]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      const auto& y = OpBuilder::value(*tp, oid);
      auto& ga = OpBuilder::grad(*tp, aid);
      for (std::size_t i = 0; i < n; ++i) {
        double mg = 0.0, mgy = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          mg += g[i * m + j];
          mgy += g[i * m + j] * y[i * m + j];
        }
        mg /= static_cast<double>(m);
        mgy /= static_cast<double>(m);
        for (std::size_t j = 0; j < m; ++j) {
          ga[i * m + j] += inv[i] * (g[i * m + j] - mg - y[i * m + j] * mgy);
        }
      }
    };
  });
}

Tensor sum(const Tensor& a) {
  check_bound(a, "sum");
  Tape& t = *a.tape;
  const auto& av = a.value();
  double s = 0.0;
  for (double v : av) s += v;
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, 1, 1, {s}, a.needs_grad(), [=](int oid) {
    return [tp, aid, oid]() {
      const double g = OpBuilder::grad(*tp, oid)[0];
      auto& ga = OpBuilder::grad(*tp, aid);
      for (double& v : ga) v += g;
    };
  });
}

Tensor mean(const Tensor& a) {
  check_bound(a, "mean");
  Tape& t = *a.tape;
  const auto& av = a.value();
  double s = 0.0;
  for (double v : av) s += v;
  const double n = static_cast<double>(av.size());
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, 1, 1, {s / n}, a.needs_grad(), [=](int oid) {
    return [tp, aid, oid, n]() {
      const double g = OpBuilder::grad(*tp, oid)[0] / n;
      auto& ga = OpBuilder::grad(*tp, aid);
      for (double& v : ga) v += g;
    };
  });
}

Tensor block_mean_rows(const Tensor& a, std::size_t block_rows) {
  check_bound(a, "block_mean_rows");
  if (block_rows == 0 || a.rows() % block_rows != 0) {
    throw ConfigError("block_mean_rows: " + std::to_string(a.rows()) +
                      " rows not divisible by block " +
                      std::to_string(block_rows));
  }
  Tape& t = *a.tape;
  const std::size_t blocks = a.rows() / block_rows, m = a.cols();
  const auto& av = a.value();
  std::vector<double> out(blocks * m, 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t r = 0; r < block_rows; ++r) {
      for (std::size_t j = 0; j < m; ++j) {
        out[b * m + j] += av[(b * block_rows + r) * m + j];
      }
    }
    for (std::size_t j = 0; j < m; ++j) {
      out[b * m + j] /= static_cast<double>(block_rows);
    }
  }
  Tape* tp = &t;
  const int aid = a.id;
  return finish(t, blocks, m, std::move(out), a.needs_grad(), [=](int oid) {
    return [tp, aid, oid, blocks, block_rows, m]() {
      const auto& g = OpBuilder::grad(*tp, oid);
      auto& ga = OpBuilder::grad(*tp, aid);
      const double scale = 1.0 / static_cast<double>(block_rows);
      for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t r = 0; r < block_rows; ++r) {
          for (std::size_t j = 0; j < m; ++j) {
            ga[(b * block_rows + r) * m + j] += g[b * m + j] * scale;
          }
        }
      }
    };
  });
}

Tensor embed(const Tensor& table, const std::vector<int>& ids) {
  check_bound(table, "embed");
  if (ids.empty()) throw ConfigError("embed: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  for (int ix : ids) {
    if (ix < 0 || static_cast<std::size_t>(ix) >= v) {
      throw ConfigError("embed: id " + std::to_string(ix) +
                        " outside vocabulary of " + std::to_string(v));
    }
  }
  Tape& t = *table.tape;
  const auto& tv = table.value();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(tv.begin() + ids[i] * static_cast<std::ptrdiff_t>(d),
              tv.begin() + (ids[i] + 1) * static_cast<std::ptrdiff_t>(d),
              out.begin() + i * d);
  }
  Tape* tp = &t;
  const int tid = table.id;
  return finish(t, ids.size(), d, std::move(out), table.needs_grad(),
                [=](int oid) {
                  return [tp, tid, oid, ids, d]() {
                    const auto& g = OpBuilder::grad(*tp, oid);
                    auto& gt = OpBuilder::grad(*tp, tid);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      for (std::size_t j = 0; j < d; ++j) {
                        gt[ids[i] * d + j] += g[i * d + j];
                      }
                    }
                  };
                });
}

namespace {

void check_grouped(const Tensor& a, const Tensor& b, std::size_t q_len,
                   std::size_t k_len, const char* op) {
  check_same_tape(a, b, op);
  if (q_len == 0 || k_len == 0 || a.rows() % q_len != 0) {
    throw ConfigError(std::string(op) + ": rows " + std::to_string(a.rows()) +
                      " not divisible into blocks of " + std::to_string(q_len));
  }
  const std::size_t groups = a.rows() / q_len;
  if (b.rows() != groups * k_len) {
    throw ConfigError(std::string(op) + ": expected " +
                      std::to_string(groups * k_len) + " rows, got " +
                      shape_str(b));
  }
}

}  // namespace

Tensor grouped_attn_scores(const Tensor& q, const Tensor& k,
                           std::size_t q_len, std::size_t k_len) {
  check_grouped(q, k, q_len, k_len, "grouped_attn_scores");
  if (q.cols() != k.cols()) {
    throw ConfigError("grouped_attn_scores: feature dims differ, " +
                      shape_str(q) + " vs " + shape_str(k));
  }
  Tape& t = *q.tape;
  const std::size_t groups = q.rows() / q_len, d = q.cols();
  std::vector<double> out(groups * q_len * k_len, 0.0);
  gmm_nt(q.value().data(), k.value().data(), out.data(), groups, q_len, k_len,
         d, t.policy());
  Tape* tp = &t;
  const int qid = q.id, kid = k.id;
  return finish(t, groups * q_len, k_len, std::move(out),
                q.needs_grad() || k.needs_grad(), [=](int oid) {
                  return [tp, qid, kid, oid, groups, q_len, k_len, d]() {
                    const auto& g = OpBuilder::grad(*tp, oid);
                    const auto& qv = OpBuilder::value(*tp, qid);
                    const auto& kv = OpBuilder::value(*tp, kid);
                    if (OpBuilder::needs(*tp, qid)) {
                      gmm_nn(g.data(), kv.data(),
                             OpBuilder::grad(*tp, qid).data(), groups, q_len,
                             k_len, d, tp->policy());
                    }
                    if (OpBuilder::needs(*tp, kid)) {
                      gmm_tn(g.data(), qv.data(),
                             OpBuilder::grad(*tp, kid).data(), groups, q_len,
                             k_len, d, tp->policy());
                    }
                  };
                });
}

Tensor grouped_attn_apply(const Tensor& a, const Tensor& v, std::size_t q_len,
                          std::size_t k_len) {
  check_grouped(a, v, q_len, k_len, "grouped_attn_apply");
  if (a.cols() != k_len) {
    throw ConfigError("grouped_attn_apply: weight cols " + shape_str(a) +
                      " must equal k_len " + std::to_string(k_len));
  }
  Tape& t = *a.tape;
  const std::size_t groups = a.rows() / q_len, d = v.cols();
  std::vector<double> out(groups * q_len * d, 0.0);
  gmm_nn(a.value().data(), v.value().data(), out.data(), groups, q_len, k_len,
         d, t.policy());
  Tape* tp = &t;
  const int aid = a.id, vid = v.id;
  return finish(t, groups * q_len, d, std::move(out),
                a.needs_grad() || v.needs_grad(), [=](int oid) {
                  return [tp, aid, vid, oid, groups, q_len, k_len, d]() {
                    const auto& g = OpBuilder::grad(*tp, oid);
                    const auto& av = OpBuilder::value(*tp, aid);
                    const auto& vv = OpBuilder::value(*tp, vid);
                    if (OpBuilder::needs(*tp, aid)) {
                      gmm_nt(g.data(), vv.data(),
                             OpBuilder::grad(*tp, aid).data(), groups, q_len,
                             k_len, d, tp->policy());
                    }
                    if (OpBuilder::needs(*tp, vid)) {
                      gmm_tn(av.data(), g.data(),
                             OpBuilder::grad(*tp, vid).data(), groups, q_len,
                             k_len, d, tp->policy());
                    }
                  };
                });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_bound(logits, "cross_entropy");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) {
    throw ConfigError("cross_entropy: " + std::to_string(labels.size()) +
                      " labels for " + std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ConfigError("cross_entropy: label " + std::to_string(y) +
                        " outside [0," + std::to_string(c) + ")");
    }
  }
  Tape& t = *logits.tape;
  const auto& x = logits.value();
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    softmax_stripe(x.data() + i * c, probs.data() + i * c, c, 1);
    double mx = x[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[i * c + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[i * c + j] - mx);
    loss += mx + std::log(z) - x[i * c + static_cast<std::size_t>(labels[i])];
  }
  loss /= static_cast<double>(n);
  Tape* tp = &t;
  const int lid = logits.id;
  return finish(t, 1, 1, {loss}, logits.needs_grad(), [=](int oid) {
    return [tp, lid, oid, labels, probs, n, c]() {
      const double g = OpBuilder::grad(*tp, oid)[0] / static_cast<double>(n);
      auto& gl = OpBuilder::grad(*tp, lid);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          const double ind =
              j == static_cast<std::size_t>(labels[i]) ? 1.0 : 0.0;
          gl[i * c + j] += g * (probs[i * c + j] - ind);
        }
      }
    };
  });
}

}  // namespace dpmld::ad
