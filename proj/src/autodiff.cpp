#include "scorer/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace scorer::ad {

namespace {

// Every kernel accumulates each output element over the inner index in
// ascending order, so a row's result never depends on how many other rows
// share the call.

// c += a * b
// four rows of c per pass share each loaded row of b
__attribute__((target_clones("avx2", "default")))
void gemm_rows(const double* ap, const double* bp, double* cp, size_t m, size_t kk, size_t n) {
  size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* __restrict c0 = cp + i * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    const double* a0 = ap + i * kk;
    for (size_t k = 0; k < kk; ++k) {
      const double v0 = a0[k], v1 = a0[kk + k], v2 = a0[2 * kk + k], v3 = a0[3 * kk + k];
      const double* __restrict bk = bp + k * n;
      for (size_t j = 0; j < n; ++j) {
        const double bv = bk[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* __restrict ci = cp + i * n;
    const double* ai = ap + i * kk;
    for (size_t k = 0; k < kk; ++k) {
      const double av = ai[k];
      const double* __restrict bk = bp + k * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
    }
  }
}

void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  gemm_rows(a.storage().data(), b.storage().data(), c.storage().data(), a.rows(), a.cols(), b.cols());
}

Tensor transposed(const Tensor& a) {
  Tensor out({a.cols(), a.rows()});
  for (size_t i = 0; i < a.rows(); ++i) {
    for (size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

// c += a^T * b, a is m x kk
__attribute__((target_clones("avx2", "default")))
void gemm_cols(const double* ap, const double* bp, double* cp, size_t m, size_t kk, size_t n) {
  // four rows of c per pass; each element still sums over i in order
  size_t k = 0;
  for (; k + 4 <= kk; k += 4) {
    double* __restrict c0 = cp + k * n;
    double* __restrict c1 = c0 + n;
    double* __restrict c2 = c1 + n;
    double* __restrict c3 = c2 + n;
    for (size_t i = 0; i < m; ++i) {
      const double* ai = ap + i * kk + k;
      const double v0 = ai[0], v1 = ai[1], v2 = ai[2], v3 = ai[3];
      const double* __restrict bi = bp + i * n;
      for (size_t j = 0; j < n; ++j) {
        const double bv = bi[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; k < kk; ++k) {
    double* __restrict ck = cp + k * n;
    for (size_t i = 0; i < m; ++i) {
      const double av = ap[i * kk + k];
      const double* __restrict bi = bp + i * n;
      for (size_t j = 0; j < n; ++j) ck[j] += av * bi[j];
    }
  }
}

void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  gemm_cols(a.storage().data(), b.storage().data(), c.storage().data(), a.rows(), a.cols(), b.cols());
}

void require(bool ok, std::string_view op, const std::string& what) {
  if (!ok) throw ShapeError(std::string(op) + ": " + what);
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ShapeError("operation on an unbound Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw ShapeError("operands live on different tapes");
  return tape_of(a);
}

std::string dims_of(const Tensor& t) { return shape_string(t.dims()); }

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }
bool Var::requires_grad() const { return tape->requires_grad(*this); }

Var Tape::constant(Tensor value) {
  return record("constant", std::move(value), false, nullptr);
}

Var Tape::variable(Tensor value) {
  return record("variable", std::move(value), true, nullptr);
}

Var Tape::record(std::string_view op, Tensor value, bool requires_grad,
                 BackwardFn fn) {
  if (backward_done_) {
    throw NumericalError("stale tape: cannot record '" + std::string(op) +
                         "' after backward");
  }
  if (!value.all_finite()) {
    throw NumericalError("non-finite value produced by '" + std::string(op) +
                         "'");
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id].requires_grad) return;
  Tensor& buf = grad_buffer(v);
  auto dst = buf.values();
  auto src = g.values();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var loss) {
  if (backward_done_) {
    throw NumericalError("stale tape: backward already ran for this forward");
  }
  if (loss.tape != this) throw ShapeError("backward: loss is from another tape");
  if (value(loss).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " +
                     dims_of(value(loss)));
  }
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss)[0] = 1.0;
  for (size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

// ---------------------------------------------------------------------------
// Dense algebra

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2, "matmul", "operands must be rank 2");
  require(av.cols() == bv.rows(), "matmul",
          "inner dims disagree " + dims_of(av) + " x " + dims_of(bv));
  Tensor out({av.rows(), bv.cols()});
  gemm_nn(av, bv, out);
  return t.record("matmul", std::move(out), any_requires_grad({a, b}),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) {
                      gemm_nn(g, transposed(b.value()), tp.grad_buffer(a));
                    }
                    if (b.requires_grad()) {
                      gemm_tn(a.value(), g, tp.grad_buffer(b));
                    }
                  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require(av.rank() == 2, "transpose", "operand must be rank 2");
  return t.record("transpose", transposed(av), a.requires_grad(),
                  [a](Tape& tp, const Tensor& g) {
                    tp.accumulate(a, transposed(g));
                  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.same_shape(bv), "add",
          "shape mismatch " + dims_of(av) + " vs " + dims_of(bv));
  Tensor out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record("add", std::move(out), any_requires_grad({a, b}),
                  [a, b](Tape& tp, const Tensor& g) {
                    tp.accumulate(a, g);
                    tp.accumulate(b, g);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.same_shape(bv), "sub",
          "shape mismatch " + dims_of(av) + " vs " + dims_of(bv));
  Tensor out = Tensor::zeros_like(av);
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return t.record("sub", std::move(out), any_requires_grad({a, b}),
                  [a, b](Tape& tp, const Tensor& g) {
                    tp.accumulate(a, g);
                    if (b.requires_grad()) {
                      Tensor& gb = tp.grad_buffer(b);
                      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                    }
                  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.same_shape(bv), "mul",
          "shape mismatch " + dims_of(av) + " vs " + dims_of(bv));
  Tensor out = Tensor::zeros_like(av);
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return t.record("mul", std::move(out), any_requires_grad({a, b}),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) {
                      Tensor& ga = tp.grad_buffer(a);
                      const Tensor& bv = b.value();
                      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                    }
                    if (b.requires_grad()) {
                      Tensor& gb = tp.grad_buffer(b);
                      const Tensor& av = a.value();
                      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                    }
                  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return t.record("scale", std::move(out), a.requires_grad(),
                  [a, s](Tape& tp, const Tensor& g) {
                    Tensor& ga = tp.grad_buffer(a);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                  });
}

Var add_row(Var x, Var b) {
  Tape& t = tape_of(x, b);
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  require(bv.size() == xv.cols(), "add_row",
          "bias " + dims_of(bv) + " does not match " + dims_of(xv));
  Tensor out = xv;
  const size_t cols = xv.cols();
  for (size_t r = 0; r < xv.rows(); ++r) {
    for (size_t c = 0; c < cols; ++c) out.at(r, c) += bv[c];
  }
  return t.record("add_row", std::move(out), any_requires_grad({x, b}),
                  [x, b, cols](Tape& tp, const Tensor& g) {
                    tp.accumulate(x, g);
                    if (b.requires_grad()) {
                      Tensor& gb = tp.grad_buffer(b);
                      for (size_t r = 0; r < g.rows(); ++r) {
                        for (size_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
                      }
                    }
                  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var relu(Var a) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return t.record("relu", std::move(out), a.requires_grad(),
                  [a](Tape& tp, const Tensor& g) {
                    Tensor& ga = tp.grad_buffer(a);
                    const Tensor& av = a.value();
                    for (size_t i = 0; i < g.size(); ++i) {
                      if (av[i] > 0.0) ga[i] += g[i];
                    }
                  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return t.record("sum", Tensor::scalar(s), a.requires_grad(),
                  [a](Tape& tp, const Tensor& g) {
                    Tensor& ga = tp.grad_buffer(a);
                    for (double& v : ga.values()) v += g[0];
                  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// ---------------------------------------------------------------------------
// Shape ops

Var concat_cols(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rows() == bv.rows(), "concat_cols",
          "row counts differ " + dims_of(av) + " vs " + dims_of(bv));
  const size_t ca = av.cols();
  const size_t cb = bv.cols();
  Tensor out({av.rows(), ca + cb});
  for (size_t r = 0; r < av.rows(); ++r) {
    std::copy(av.row(r).begin(), av.row(r).end(), out.row(r).begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), out.row(r).begin() + ca);
  }
  return t.record("concat_cols", std::move(out), any_requires_grad({a, b}),
                  [a, b, ca, cb](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) {
                      Tensor& ga = tp.grad_buffer(a);
                      for (size_t r = 0; r < g.rows(); ++r) {
                        for (size_t c = 0; c < ca; ++c) ga.at(r, c) += g.at(r, c);
                      }
                    }
                    if (b.requires_grad()) {
                      Tensor& gb = tp.grad_buffer(b);
                      for (size_t r = 0; r < g.rows(); ++r) {
                        for (size_t c = 0; c < cb; ++c) {
                          gb.at(r, c) += g.at(r, ca + c);
                        }
                      }
                    }
                  });
}

Var slice_cols(Var a, size_t start, size_t count) {
  Tape& t = tape_of(a);
  const Tensor& av = a.value();
  require(count > 0 && start + count <= av.cols(), "slice_cols",
          "range out of bounds for " + dims_of(av));
  Tensor out({av.rows(), count});
  for (size_t r = 0; r < av.rows(); ++r) {
    for (size_t c = 0; c < count; ++c) out.at(r, c) = av.at(r, start + c);
  }
  return t.record("slice_cols", std::move(out), a.requires_grad(),
                  [a, start, count](Tape& tp, const Tensor& g) {
                    Tensor& ga = tp.grad_buffer(a);
                    for (size_t r = 0; r < g.rows(); ++r) {
                      for (size_t c = 0; c < count; ++c) {
                        ga.at(r, start + c) += g.at(r, c);
                      }
                    }
                  });
}

Var mean_pool_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  const size_t n = xv.rows();
  const size_t d = xv.cols();
  Tensor out({d});
  for (size_t r = 0; r < n; ++r) {
    for (size_t c = 0; c < d; ++c) out[c] += xv.at(r, c);
  }
  for (double& v : out.values()) v /= static_cast<double>(n);
  return t.record("mean_pool_rows", std::move(out), x.requires_grad(),
                  [x, n, d](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    const double inv = 1.0 / static_cast<double>(n);
                    for (size_t r = 0; r < n; ++r) {
                      for (size_t c = 0; c < d; ++c) gx.at(r, c) += g[c] * inv;
                    }
                  });
}

Var embedding_gather(Var table, std::span<const int64_t> ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  require(tv.rank() == 2, "embedding_gather", "table must be rank 2");
  require(!ids.empty(), "embedding_gather", "no ids");
  const size_t d = tv.cols();
  Tensor out({ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= tv.rows()) {
      throw ShapeError("embedding_gather: index " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(tv.rows()) +
                       " rows");
    }
    auto src = tv.row(static_cast<size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<int64_t> saved(ids.begin(), ids.end());
  return t.record("embedding_gather", std::move(out), table.requires_grad(),
                  [table, saved = std::move(saved), d](Tape& tp, const Tensor& g) {
                    Tensor& gt = tp.grad_buffer(table);
                    for (size_t i = 0; i < saved.size(); ++i) {
                      const auto r = static_cast<size_t>(saved[i]);
                      for (size_t c = 0; c < d; ++c) gt.at(r, c) += g.at(i, c);
                    }
                  });
}

Var broadcast_rows(Var v, size_t n) {
  Tape& t = tape_of(v);
  const Tensor& vv = v.value();
  require(n > 0, "broadcast_rows", "row count must be positive");
  const size_t d = vv.size();
  Tensor out({n, d});
  for (size_t r = 0; r < n; ++r) {
    std::copy(vv.values().begin(), vv.values().end(), out.row(r).begin());
  }
  return t.record("broadcast_rows", std::move(out), v.requires_grad(),
                  [v, n, d](Tape& tp, const Tensor& g) {
                    Tensor& gv = tp.grad_buffer(v);
                    for (size_t r = 0; r < n; ++r) {
                      for (size_t c = 0; c < d; ++c) gv[c] += g.at(r, c);
                    }
                  });
}

Var tile_rows(Var x, size_t times) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require(times > 0, "tile_rows", "repeat count must be positive");
  const size_t n = xv.rows();
  const size_t d = xv.cols();
  Tensor out({n * times, d});
  for (size_t k = 0; k < times; ++k) {
    std::copy(xv.values().begin(), xv.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(k * n * d));
  }
  return t.record("tile_rows", std::move(out), x.requires_grad(),
                  [x, times, n, d](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    for (size_t k = 0; k < times; ++k) {
                      for (size_t i = 0; i < n * d; ++i) gx[i] += g[k * n * d + i];
                    }
                  });
}

// ---------------------------------------------------------------------------
// Normalisation and losses

namespace {

void softmax_inplace(std::span<double> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : row) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : row) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : row) v /= z;
}

}  // namespace

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  Tensor out = x.value();
  for (size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  Var y{&t, t.size()};  // id of the node about to be recorded
  return t.record("softmax_rows", std::move(out), x.requires_grad(),
                  [x, y](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    const Tensor& yv = y.value();
                    for (size_t r = 0; r < g.rows(); ++r) {
                      const double s = dot(g.row(r), yv.row(r));
                      for (size_t c = 0; c < g.cols(); ++c) {
                        gx.at(r, c) += yv.at(r, c) * (g.at(r, c) - s);
                      }
                    }
                  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  const Tensor& xv = x.value();
  const size_t n = xv.rows();
  const size_t d = xv.cols();
  require(d >= 1, "layer_norm", "feature width must be positive");
  require(gamma.value().size() == d && beta.value().size() == d, "layer_norm",
          "gamma/beta width does not match " + dims_of(xv));
  auto xhat = std::make_shared<Tensor>(Tensor::zeros_like(xv));
  auto inv_std = std::make_shared<std::vector<double>>(n);
  Tensor out = Tensor::zeros_like(xv);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (double v : xv.row(r)) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : xv.row(r)) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (size_t c = 0; c < d; ++c) {
      const double h = (xv.at(r, c) - mu) * is;
      xhat->at(r, c) = h;
      out.at(r, c) = h * gv[c] + bv[c];
    }
  }
  return t.record(
      "layer_norm", std::move(out), any_requires_grad({x, gamma, beta}),
      [x, gamma, beta, xhat, inv_std, n, d](Tape& tp, const Tensor& g) {
        const Tensor& gv = gamma.value();
        if (gamma.requires_grad()) {
          Tensor& gg = tp.grad_buffer(gamma);
          for (size_t r = 0; r < n; ++r) {
            for (size_t c = 0; c < d; ++c) gg[c] += g.at(r, c) * xhat->at(r, c);
          }
        }
        if (beta.requires_grad()) {
          Tensor& gb = tp.grad_buffer(beta);
          for (size_t r = 0; r < n; ++r) {
            for (size_t c = 0; c < d; ++c) gb[c] += g.at(r, c);
          }
        }
        if (x.requires_grad()) {
          Tensor& gx = tp.grad_buffer(x);
          std::vector<double> dh(d);
          for (size_t r = 0; r < n; ++r) {
            double m1 = 0.0;
            double m2 = 0.0;
            for (size_t c = 0; c < d; ++c) {
              dh[c] = g.at(r, c) * gv[c];
              m1 += dh[c];
              m2 += dh[c] * xhat->at(r, c);
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            const double is = (*inv_std)[r];
            for (size_t c = 0; c < d; ++c) {
              gx.at(r, c) += is * (dh[c] - m1 - xhat->at(r, c) * m2);
            }
          }
        }
      });
}

Var l2_normalize_rows(Var x, size_t blocks) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require(blocks >= 1 && xv.cols() % blocks == 0, "l2_normalize_rows",
          "width " + std::to_string(xv.cols()) + " not divisible into " +
              std::to_string(blocks) + " blocks");
  const size_t n = xv.rows();
  const size_t w = xv.cols() / blocks;
  auto norms = std::make_shared<std::vector<double>>(n * blocks);
  Tensor out = Tensor::zeros_like(xv);
  for (size_t r = 0; r < n; ++r) {
    for (size_t b = 0; b < blocks; ++b) {
      auto seg = xv.row(r).subspan(b * w, w);
      const double nm = std::sqrt(dot(seg, seg));
      (*norms)[r * blocks + b] = nm;
      if (nm == 0.0) continue;
      for (size_t c = 0; c < w; ++c) out.at(r, b * w + c) = seg[c] / nm;
    }
  }
  Var y{&t, t.size()};
  return t.record("l2_normalize_rows", std::move(out), x.requires_grad(),
                  [x, y, norms, blocks, w](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    const Tensor& yv = y.value();
                    for (size_t r = 0; r < g.rows(); ++r) {
                      for (size_t b = 0; b < blocks; ++b) {
                        const double nm = (*norms)[r * blocks + b];
                        if (nm == 0.0) continue;
                        auto gs = g.row(r).subspan(b * w, w);
                        auto ys = yv.row(r).subspan(b * w, w);
                        const double proj = dot(gs, ys);
                        for (size_t c = 0; c < w; ++c) {
                          gx.at(r, b * w + c) += (gs[c] - ys[c] * proj) / nm;
                        }
                      }
                    }
                  });
}

Var cross_entropy_with_logits(Var logits, std::span<const int64_t> targets,
                              std::optional<int64_t> ignore_id) {
  Tape& t = tape_of(logits);
  const Tensor& lv = logits.value();
  const size_t m = lv.rows();
  const size_t u = lv.cols();
  require(targets.size() == m, "cross_entropy_with_logits",
          "target count " + std::to_string(targets.size()) +
              " does not match " + std::to_string(m) + " rows");
  auto probs = std::make_shared<Tensor>(lv);
  std::vector<int64_t> saved(targets.begin(), targets.end());
  size_t active = 0;
  double total = 0.0;
  for (size_t r = 0; r < m; ++r) {
    const int64_t tgt = targets[r];
    if (ignore_id && tgt == *ignore_id) continue;
    if (tgt < 0 || static_cast<size_t>(tgt) >= u) {
      throw ShapeError("cross_entropy_with_logits: target " +
                       std::to_string(tgt) + " outside [0," +
                       std::to_string(u) + ")");
    }
    auto row = lv.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += (mx + std::log(z)) - row[static_cast<size_t>(tgt)];
    ++active;
  }
  require(active > 0, "cross_entropy_with_logits", "no active targets");
  for (size_t r = 0; r < m; ++r) softmax_inplace(probs->row(r));
  const double inv = 1.0 / static_cast<double>(active);
  return t.record(
      "cross_entropy_with_logits", Tensor::scalar(total * inv),
      logits.requires_grad(),
      [logits, probs, saved = std::move(saved), ignore_id, inv](
          Tape& tp, const Tensor& g) {
        Tensor& gl = tp.grad_buffer(logits);
        const double s = g[0] * inv;
        for (size_t r = 0; r < saved.size(); ++r) {
          if (ignore_id && saved[r] == *ignore_id) continue;
          for (size_t c = 0; c < gl.cols(); ++c) gl.at(r, c) += s * probs->at(r, c);
          gl.at(r, static_cast<size_t>(saved[r])) -= s;
        }
      });
}

Var segment_pool(Var x, size_t segments, PoolMode mode) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  require(segments >= 1 && xv.rows() % segments == 0, "segment_pool",
          "rows not divisible into segments");
  const size_t n = xv.rows() / segments;
  const size_t d = xv.cols();
  Tensor out({segments, d});
  auto arg = std::make_shared<std::vector<size_t>>();
  if (mode == PoolMode::kMax) arg->resize(segments * d);
  for (size_t s = 0; s < segments; ++s) {
    for (size_t c = 0; c < d; ++c) {
      if (mode == PoolMode::kMean) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += xv.at(s * n + i, c);
        out.at(s, c) = acc / static_cast<double>(n);
      } else {
        size_t best = 0;
        for (size_t i = 1; i < n; ++i) {
          if (xv.at(s * n + i, c) > xv.at(s * n + best, c)) best = i;
        }
        (*arg)[s * d + c] = best;
        out.at(s, c) = xv.at(s * n + best, c);
      }
    }
  }
  return t.record("segment_pool", std::move(out), x.requires_grad(),
                  [x, n, d, mode, arg](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    for (size_t s = 0; s < g.rows(); ++s) {
                      for (size_t c = 0; c < d; ++c) {
                        if (mode == PoolMode::kMean) {
                          const double v = g.at(s, c) / static_cast<double>(n);
                          for (size_t i = 0; i < n; ++i) gx.at(s * n + i, c) += v;
                        } else {
                          gx.at(s * n + (*arg)[s * d + c], c) += g.at(s, c);
                        }
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Attention

Var attention_core(Var q, Var k, Var v, const AttentionShape& shape,
                   AttentionTrace* trace) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const size_t segs = shape.segments;
  const size_t heads = shape.heads;
  const size_t dm = qv.cols();
  require(heads >= 1 && dm % heads == 0, "attention",
          "width " + std::to_string(dm) + " not divisible by " +
              std::to_string(heads) + " heads");
  require(kv.cols() == dm && vv.cols() == dm, "attention",
          "q/k/v widths differ");
  require(kv.rows() == vv.rows(), "attention", "k and v row counts differ");
  require(segs >= 1 && qv.rows() % segs == 0 && kv.rows() % segs == 0,
          "attention", "rows not divisible into segments");
  const size_t nq = qv.rows() / segs;
  const size_t nk = kv.rows() / segs;
  require(!shape.causal || nq == nk, "attention",
          "causal mask needs equal query/key counts");
  const size_t dh = dm / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto weights = std::make_shared<std::vector<double>>(segs * heads * nq * nk);
  Tensor out({qv.rows(), dm});
  std::vector<double> scores(nk);
  for (size_t s = 0; s < segs; ++s) {
    for (size_t h = 0; h < heads; ++h) {
      for (size_t i = 0; i < nq; ++i) {
        auto qi = qv.row(s * nq + i).subspan(h * dh, dh);
        const size_t limit = shape.causal ? i + 1 : nk;
        double* w = weights->data() + ((s * heads + h) * nq + i) * nk;
        for (size_t j = 0; j < limit; ++j) {
          scores[j] = sc * dot(qi, kv.row(s * nk + j).subspan(h * dh, dh));
        }
        softmax_inplace(std::span<double>(scores.data(), limit));
        for (size_t j = 0; j < nk; ++j) w[j] = j < limit ? scores[j] : 0.0;
        auto oi = out.row(s * nq + i).subspan(h * dh, dh);
        for (size_t j = 0; j < limit; ++j) {
          auto vj = vv.row(s * nk + j).subspan(h * dh, dh);
          for (size_t c = 0; c < dh; ++c) oi[c] += w[j] * vj[c];
        }
      }
    }
  }
  if (trace != nullptr) {
    trace->segments = segs;
    trace->heads = heads;
    trace->queries = nq;
    trace->keys = nk;
    trace->weights = *weights;
  }
  return t.record(
      "attention", std::move(out), any_requires_grad({q, k, v}),
      [q, k, v, weights, segs, heads, nq, nk, dh, sc, causal = shape.causal](
          Tape& tp, const Tensor& g) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        Tensor* gq = q.requires_grad() ? &tp.grad_buffer(q) : nullptr;
        Tensor* gk = k.requires_grad() ? &tp.grad_buffer(k) : nullptr;
        Tensor* gv = v.requires_grad() ? &tp.grad_buffer(v) : nullptr;
        std::vector<double> dw(nk);
        for (size_t s = 0; s < segs; ++s) {
          for (size_t h = 0; h < heads; ++h) {
            for (size_t i = 0; i < nq; ++i) {
              const size_t limit = causal ? i + 1 : nk;
              const double* w = weights->data() + ((s * heads + h) * nq + i) * nk;
              auto gi = g.row(s * nq + i).subspan(h * dh, dh);
              double wd = 0.0;
              for (size_t j = 0; j < limit; ++j) {
                auto vj = vv.row(s * nk + j).subspan(h * dh, dh);
                dw[j] = dot(gi, vj);
                wd += w[j] * dw[j];
                if (gv != nullptr) {
                  auto gvj = gv->row(s * nk + j).subspan(h * dh, dh);
                  for (size_t c = 0; c < dh; ++c) gvj[c] += w[j] * gi[c];
                }
              }
              auto qi = qv.row(s * nq + i).subspan(h * dh, dh);
              for (size_t j = 0; j < limit; ++j) {
                const double ds = w[j] * (dw[j] - wd) * sc;
                if (ds == 0.0) continue;
                auto kj = kv.row(s * nk + j).subspan(h * dh, dh);
                if (gq != nullptr) {
                  auto gqi = gq->row(s * nq + i).subspan(h * dh, dh);
                  for (size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk != nullptr) {
                  auto gkj = gk->row(s * nk + j).subspan(h * dh, dh);
                  for (size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace scorer::ad
