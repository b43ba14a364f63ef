#include "scorer/similarity.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>

namespace scorer::similarity {

namespace {

std::atomic<uint64_t> g_evaluations{0};

void count_evaluation() { g_evaluations.fetch_add(1, std::memory_order_relaxed); }

double sorted_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

/// TM between token blocks p[p0 .. p0+n) and k[k0 .. k0+n), restricted to the
/// column range [c0, c0+d). Arg-max indices (first maximum) are written to
/// row_arg[n] / col_arg[n] when non-null. Maxima are summed in sorted order
/// so the score is invariant to token order bit for bit.
double tm_block(const Tensor& p, size_t p0, const Tensor& k, size_t k0,
                size_t n, size_t c0, size_t d, size_t* row_arg,
                size_t* col_arg, std::vector<double>& scratch) {
  scratch.resize(n * n);
  for (size_t i = 0; i < n; ++i) {
    auto pi = p.row(p0 + i).subspan(c0, d);
    for (size_t j = 0; j < n; ++j) {
      scratch[i * n + j] = dot(pi, k.row(k0 + j).subspan(c0, d));
    }
  }
  std::vector<double> row_max(n);
  std::vector<double> col_max(n);
  for (size_t i = 0; i < n; ++i) {
    size_t best = 0;
    for (size_t j = 1; j < n; ++j) {
      if (scratch[i * n + j] > scratch[i * n + best]) best = j;
    }
    row_max[i] = scratch[i * n + best];
    if (row_arg != nullptr) row_arg[i] = best;
  }
  for (size_t j = 0; j < n; ++j) {
    size_t best = 0;
    for (size_t i = 1; i < n; ++i) {
      if (scratch[i * n + j] > scratch[best * n + j]) best = i;
    }
    col_max[j] = scratch[best * n + j];
    if (col_arg != nullptr) col_arg[j] = best;
  }
  const double dn = static_cast<double>(n);
  return (sorted_sum(row_max) / dn + sorted_sum(col_max) / dn) / 2.0;
}

void check_tokens(const Tensor& q, const Tensor& k, std::string_view op) {
  if (q.rank() != 2 || k.rank() != 2) {
    throw ShapeError(std::string(op) + ": token sets must be rank 2");
  }
  if (q.rows() != k.rows()) {
    throw ShapeError(std::string(op) + ": token counts differ (" +
                     std::to_string(q.rows()) + " vs " +
                     std::to_string(k.rows()) + ")");
  }
  if (q.cols() != k.cols()) {
    throw ShapeError(std::string(op) + ": token widths differ");
  }
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("empty batch");
  const size_t n = items[0].rows();
  const size_t d = items[0].cols();
  Tensor out({items.size() * n, d});
  for (size_t b = 0; b < items.size(); ++b) {
    if (items[b].rows() != n || items[b].cols() != d) {
      throw ShapeError("batch grids have inconsistent shapes");
    }
    std::copy(items[b].values().begin(), items[b].values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(b * n * d));
  }
  return out;
}

}  // namespace

SimMode parse_sim_mode(std::string_view s) {
  if (s == "mtm") return SimMode::kMtm;
  if (s == "tm") return SimMode::kTm;
  if (s == "mean-pool") return SimMode::kMeanPool;
  if (s == "max-pool") return SimMode::kMaxPool;
  throw std::invalid_argument("unknown sim_mode '" + std::string(s) + "'");
}

LossMode parse_loss_mode(std::string_view s) {
  if (s == "infonce") return LossMode::kInfoNce;
  if (s == "l2") return LossMode::kL2;
  throw std::invalid_argument("unknown loss_mode '" + std::string(s) + "'");
}

std::string to_string(SimMode m) {
  switch (m) {
    case SimMode::kMtm: return "mtm";
    case SimMode::kTm: return "tm";
    case SimMode::kMeanPool: return "mean-pool";
    case SimMode::kMaxPool: return "max-pool";
  }
  return "?";
}

std::string to_string(LossMode m) {
  return m == LossMode::kInfoNce ? "infonce" : "l2";
}

uint64_t evaluation_count() { return g_evaluations.load(); }

// ---------------------------------------------------------------------------
// Differentiable ops

ad::Var tm_matrix(ad::Var befores, ad::Var afters, size_t segments,
                  size_t heads) {
  count_evaluation();
  ad::Tape& t = *befores.tape;
  const Tensor& pv = befores.value();
  const Tensor& kv = afters.value();
  if (pv.rank() != 2 || !pv.same_shape(kv)) {
    throw ShapeError("tm_matrix: before/after stacks must have equal shape");
  }
  if (segments == 0 || pv.rows() % segments != 0) {
    throw ShapeError("tm_matrix: rows not divisible into segments");
  }
  if (heads == 0 || pv.cols() % heads != 0) {
    throw ShapeError("tm_matrix: width not divisible by head count");
  }
  const size_t n = pv.rows() / segments;
  const size_t d = pv.cols() / heads;
  const size_t bsz = segments;
  // Arg-max layout per (b, r, h): n row entries then n column entries.
  auto args = std::make_shared<std::vector<size_t>>(bsz * bsz * heads * 2 * n);
  Tensor out({bsz, bsz});
  std::vector<double> scratch;
  for (size_t b = 0; b < bsz; ++b) {
    for (size_t r = 0; r < bsz; ++r) {
      double acc = 0.0;
      for (size_t h = 0; h < heads; ++h) {
        size_t* base = args->data() + ((b * bsz + r) * heads + h) * 2 * n;
        acc += tm_block(pv, b * n, kv, r * n, n, h * d, d, base, base + n,
                        scratch);
      }
      out.at(b, r) = acc / static_cast<double>(heads);
    }
  }
  return t.record(
      "tm_matrix", std::move(out), ad::any_requires_grad({befores, afters}),
      [befores, afters, args, bsz, heads, n, d](ad::Tape& tp, const Tensor& g) {
        const Tensor& pv = befores.value();
        const Tensor& kv = afters.value();
        Tensor* gp = befores.requires_grad() ? &tp.grad_buffer(befores) : nullptr;
        Tensor* gk = afters.requires_grad() ? &tp.grad_buffer(afters) : nullptr;
        const double norm = 1.0 / (2.0 * static_cast<double>(n * heads));
        for (size_t b = 0; b < bsz; ++b) {
          for (size_t r = 0; r < bsz; ++r) {
            const double c = g.at(b, r) * norm;
            if (c == 0.0) continue;
            for (size_t h = 0; h < heads; ++h) {
              const size_t* base =
                  args->data() + ((b * bsz + r) * heads + h) * 2 * n;
              const size_t c0 = h * d;
              auto pair = [&](size_t i, size_t j) {
                if (gp != nullptr) {
                  auto dst = gp->row(b * n + i).subspan(c0, d);
                  auto src = kv.row(r * n + j).subspan(c0, d);
                  for (size_t x = 0; x < d; ++x) dst[x] += c * src[x];
                }
                if (gk != nullptr) {
                  auto dst = gk->row(r * n + j).subspan(c0, d);
                  auto src = pv.row(b * n + i).subspan(c0, d);
                  for (size_t x = 0; x < d; ++x) dst[x] += c * src[x];
                }
              };
              for (size_t i = 0; i < n; ++i) pair(i, base[i]);
              for (size_t j = 0; j < n; ++j) pair(base[n + j], j);
            }
          }
        }
      });
}

ad::Var pairwise_dot(ad::Var a, ad::Var b) {
  ad::Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) throw ShapeError("pairwise_dot: widths differ");
  Tensor out({av.rows(), bv.rows()});
  for (size_t i = 0; i < av.rows(); ++i) {
    for (size_t j = 0; j < bv.rows(); ++j) out.at(i, j) = dot(av.row(i), bv.row(j));
  }
  return t.record("pairwise_dot", std::move(out), ad::any_requires_grad({a, b}),
                  [a, b](ad::Tape& tp, const Tensor& g) {
                    const Tensor& av = a.value();
                    const Tensor& bv = b.value();
                    const size_t d = av.cols();
                    Tensor* ga = a.requires_grad() ? &tp.grad_buffer(a) : nullptr;
                    Tensor* gb = b.requires_grad() ? &tp.grad_buffer(b) : nullptr;
                    for (size_t i = 0; i < av.rows(); ++i) {
                      for (size_t j = 0; j < bv.rows(); ++j) {
                        const double c = g.at(i, j);
                        for (size_t x = 0; x < d; ++x) {
                          if (ga) ga->at(i, x) += c * bv.at(j, x);
                          if (gb) gb->at(j, x) += c * av.at(i, x);
                        }
                      }
                    }
                  });
}

ad::Var batch_similarity(ad::Var befores, ad::Var afters, size_t segments,
                         const AlignmentConfig& cfg, const MtmWeights& w) {
  switch (cfg.sim_mode) {
    case SimMode::kMtm: {
      ad::Var pq = ad::l2_normalize_rows(ad::matmul(befores, w.query), w.heads);
      ad::Var pk = ad::l2_normalize_rows(ad::matmul(afters, w.key), w.heads);
      return tm_matrix(pq, pk, segments, w.heads);
    }
    case SimMode::kTm:
      return tm_matrix(ad::l2_normalize_rows(befores),
                       ad::l2_normalize_rows(afters), segments, 1);
    case SimMode::kMeanPool:
    case SimMode::kMaxPool: {
      count_evaluation();
      const auto mode = cfg.sim_mode == SimMode::kMeanPool ? ad::PoolMode::kMean
                                                           : ad::PoolMode::kMax;
      ad::Var pb = ad::l2_normalize_rows(ad::segment_pool(befores, segments, mode));
      ad::Var pa = ad::l2_normalize_rows(ad::segment_pool(afters, segments, mode));
      return pairwise_dot(pb, pa);
    }
  }
  throw std::logic_error("unhandled sim mode");
}

ad::Var info_nce(ad::Var s, double temperature) {
  count_evaluation();
  if (!(temperature > 0.0)) throw std::invalid_argument("info_nce: tau must be > 0");
  const Tensor& sv = s.value();
  if (sv.rank() != 2 || sv.rows() != sv.cols()) {
    throw ShapeError("info_nce: similarity matrix must be square, got " +
                     shape_string(sv.dims()));
  }
  const size_t bsz = sv.rows();
  // Row-wise and column-wise softmax of s / tau.
  auto row_p = std::make_shared<Tensor>(Tensor({bsz, bsz}));
  auto col_p = std::make_shared<Tensor>(Tensor({bsz, bsz}));
  double row_term = 0.0;
  double col_term = 0.0;
  for (size_t k = 0; k < bsz; ++k) {
    double mr = -std::numeric_limits<double>::infinity();
    double mc = mr;
    for (size_t r = 0; r < bsz; ++r) {
      mr = std::max(mr, sv.at(k, r) / temperature);
      mc = std::max(mc, sv.at(r, k) / temperature);
    }
    double zr = 0.0;
    double zc = 0.0;
    for (size_t r = 0; r < bsz; ++r) {
      row_p->at(k, r) = std::exp(sv.at(k, r) / temperature - mr);
      zr += row_p->at(k, r);
      col_p->at(r, k) = std::exp(sv.at(r, k) / temperature - mc);
      zc += col_p->at(r, k);
    }
    for (size_t r = 0; r < bsz; ++r) {
      row_p->at(k, r) /= zr;
      col_p->at(r, k) /= zc;
    }
    const double diag = sv.at(k, k) / temperature;
    row_term += (mr + std::log(zr)) - diag;
    col_term += (mc + std::log(zc)) - diag;
  }
  const double db = static_cast<double>(bsz);
  const double loss = 0.5 * (row_term / db + col_term / db);
  return s.tape->record(
      "info_nce", Tensor::scalar(loss), s.requires_grad(),
      [s, row_p, col_p, bsz, temperature](ad::Tape& tp, const Tensor& g) {
        Tensor& gs = tp.grad_buffer(s);
        const double c = g[0] * 0.5 / (static_cast<double>(bsz) * temperature);
        for (size_t k = 0; k < bsz; ++k) {
          for (size_t r = 0; r < bsz; ++r) {
            double v = row_p->at(k, r) + col_p->at(k, r);
            if (k == r) v -= 2.0;
            gs.at(k, r) += c * v;
          }
        }
      });
}

ad::Var l2_alignment(ad::Var befores, ad::Var afters, size_t segments) {
  count_evaluation();
  ad::Var pb = ad::l2_normalize_rows(
      ad::segment_pool(befores, segments, ad::PoolMode::kMean));
  ad::Var pa = ad::l2_normalize_rows(
      ad::segment_pool(afters, segments, ad::PoolMode::kMean));
  ad::Var diff = ad::sub(pb, pa);
  return ad::scale(ad::sum(ad::mul(diff, diff)),
                   1.0 / static_cast<double>(segments));
}

ad::Var alignment_loss(ad::Var befores, ad::Var afters, size_t segments,
                       const AlignmentConfig& cfg, const MtmWeights& w) {
  if (cfg.loss_mode == LossMode::kL2) {
    return l2_alignment(befores, afters, segments);
  }
  return info_nce(batch_similarity(befores, afters, segments, cfg, w),
                  cfg.temperature);
}

// ---------------------------------------------------------------------------
// Value-level wrappers

double tm_similarity(const Tensor& q, const Tensor& k) {
  check_tokens(q, k, "tm_similarity");
  if (q.rows() == 0) throw ShapeError("tm_similarity: no tokens");
  count_evaluation();
  std::vector<double> scratch;
  return tm_block(q, 0, k, 0, q.rows(), 0, q.cols(), nullptr, nullptr, scratch);
}

double mtm_similarity(const Tensor& q, const Tensor& k, const Tensor& w_query,
                      const Tensor& w_key, size_t heads) {
  check_tokens(q, k, "mtm_similarity");
  if (w_query.rows() != q.cols() || w_key.rows() != k.cols() ||
      !w_query.same_shape(w_key)) {
    throw ShapeError("mtm_similarity: projection dims incompatible with tokens");
  }
  ad::Tape t;
  MtmWeights w{t.constant(w_query), t.constant(w_key), heads};
  ad::Var s = batch_similarity(t.constant(q), t.constant(k), 1,
                               AlignmentConfig{}, w);
  return s.value().item();
}

double pooled_similarity(const Tensor& q, const Tensor& k, ad::PoolMode mode) {
  check_tokens(q, k, "pooled_similarity");
  AlignmentConfig cfg;
  cfg.sim_mode = mode == ad::PoolMode::kMean ? SimMode::kMeanPool : SimMode::kMaxPool;
  ad::Tape t;
  MtmWeights unused;
  return batch_similarity(t.constant(q), t.constant(k), 1, cfg, unused)
      .value()
      .item();
}

Tensor batch_similarity(std::span<const Tensor> befores,
                        std::span<const Tensor> afters,
                        const AlignmentConfig& cfg, const Tensor& w_query,
                        const Tensor& w_key, size_t heads) {
  if (befores.size() != afters.size()) {
    throw ShapeError("batch_similarity: batch sizes differ (" +
                     std::to_string(befores.size()) + " vs " +
                     std::to_string(afters.size()) + ")");
  }
  ad::Tape t;
  MtmWeights w;
  if (cfg.sim_mode == SimMode::kMtm) {
    w = MtmWeights{t.constant(w_query), t.constant(w_key), heads};
  }
  Tensor sb = stack(befores);
  Tensor sa = stack(afters);
  if (!sb.same_shape(sa)) throw ShapeError("batch_similarity: grid shapes differ");
  return batch_similarity(t.constant(std::move(sb)), t.constant(std::move(sa)),
                          befores.size(), cfg, w)
      .value();
}

double info_nce_bidirectional(const Tensor& s, double temperature) {
  ad::Tape t;
  return info_nce(t.constant(s), temperature).value().item();
}

double l2_alignment(std::span<const Tensor> befores,
                    std::span<const Tensor> afters) {
  if (befores.size() != afters.size()) {
    throw ShapeError("l2_alignment: batch sizes differ");
  }
  ad::Tape t;
  return l2_alignment(t.constant(stack(befores)), t.constant(stack(afters)),
                      befores.size())
      .value()
      .item();
}

}  // namespace scorer::similarity
