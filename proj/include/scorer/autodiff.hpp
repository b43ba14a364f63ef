#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include "scorer/tensor.hpp"

namespace scorer::ad {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  size_t id = 0;

  const Tensor& value() const;
  bool requires_grad() const;
  explicit operator bool() const { return tape != nullptr; }
};

/// Linear record of a forward pass. Nodes are appended in execution order,
/// so every input precedes the node that consumes it. A tape supports
/// exactly one backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);

  /// Append an op result. `fn` is dropped when no input requires grad.
  Var record(std::string_view op, Tensor value, bool requires_grad,
             BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward pass; zeros for unreachable nodes.
  Tensor grad(Var v) const;

  /// Adds `g` into v's gradient buffer (no-op when v is a constant).
  void accumulate(Var v, const Tensor& g);
  /// Mutable gradient buffer, zero-initialised on first use.
  Tensor& grad_buffer(Var v);

  void backward(Var loss);
  bool backward_done() const { return backward_done_; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline bool any_requires_grad(std::initializer_list<Var> vars) {
  for (const Var& v : vars) {
    if (v.requires_grad()) return true;
  }
  return false;
}

// Dense algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// x[rows x D] + b[D] broadcast over rows.
Var add_row(Var x, Var b);
/// x * w + b
Var linear(Var x, Var w, Var b);
Var relu(Var a);
Var sum(Var a);
Var mean(Var a);

// Shape ops.
Var concat_cols(Var a, Var b);
Var slice_cols(Var a, size_t start, size_t count);
/// Column means of x[rows x D] -> [D].
Var mean_pool_rows(Var x);
/// Row-wise table lookup; throws on an out-of-range id.
Var embedding_gather(Var table, std::span<const int64_t> ids);
/// v[D] -> [n x D]
Var broadcast_rows(Var v, size_t n);
/// x[n x D] -> [times*n x D], stacking copies of x.
Var tile_rows(Var x, size_t times);

// Normalisation and losses.
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Each row's `blocks` equal column groups scaled to unit L2 norm; a zero
/// group stays zero.
Var l2_normalize_rows(Var x, size_t blocks = 1);
/// Mean over rows of -log softmax(logits)[target]; rows whose target equals
/// `ignore_id` are excluded from the mean.
Var cross_entropy_with_logits(Var logits, std::span<const int64_t> targets,
                              std::optional<int64_t> ignore_id = std::nullopt);

/// Per-segment pooling of a stacked [segments*n x D] tensor into [segments x D].
enum class PoolMode { kMean, kMax };
Var segment_pool(Var x, size_t segments, PoolMode mode);

/// Recorded attention weights, laid out [segment][head][query][key].
struct AttentionTrace {
  size_t segments = 0;
  size_t heads = 0;
  size_t queries = 0;
  size_t keys = 0;
  std::vector<double> weights;

  double at(size_t s, size_t h, size_t i, size_t j) const {
    return weights[((s * heads + h) * queries + i) * keys + j];
  }
};

struct AttentionShape {
  size_t heads = 1;
  size_t segments = 1;
  bool causal = false;
};

/// Scaled dot-product attention on already-projected q, k, v. Queries of
/// segment s (rows s*nq..) attend only to keys of segment s. Columns are split
/// into `heads` groups, each scaled by 1/sqrt(D/heads); head outputs are
/// concatenated in column order.
Var attention_core(Var q, Var k, Var v, const AttentionShape& shape,
                   AttentionTrace* trace = nullptr);

}  // namespace scorer::ad
