#include "scorer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "scorer/layers.hpp"
#include "scorer/model.hpp"
#include "scorer/params.hpp"
#include "scorer/similarity.hpp"

namespace scorer::gradcheck {

namespace {

double eval(const Case& c, const std::vector<Tensor>& inputs) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return c.fn(tape, vars).value().item();
}

}  // namespace

Result check(const Case& c, double step) {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  for (const Tensor& t : c.inputs) vars.push_back(tape.variable(t));
  ad::Var loss = c.fn(tape, vars);
  tape.backward(loss);

  Result r;
  r.name = c.name;
  std::vector<Tensor> work = c.inputs;
  for (size_t i = 0; i < work.size(); ++i) {
    const Tensor analytic = tape.grad(vars[i]);
    double max_diff = 0.0, max_a = 0.0, max_n = 0.0;
    for (size_t e = 0; e < work[i].size(); ++e) {
      const double orig = work[i][e];
      work[i][e] = orig + step;
      const double up = eval(c, work);
      work[i][e] = orig - step;
      const double down = eval(c, work);
      work[i][e] = orig;
      const double numeric = (up - down) / (2.0 * step);
      max_diff = std::max(max_diff, std::abs(analytic[e] - numeric));
      max_a = std::max(max_a, std::abs(analytic[e]));
      max_n = std::max(max_n, std::abs(numeric));
      ++r.checked;
    }
    r.max_rel_error =
        std::max(r.max_rel_error, max_diff / std::max({max_a, max_n, 1e-6}));
  }
  return r;
}

TrainConfig tiny_config() {
  TrainConfig c;
  ModelConfig& m = c.model;
  m.grid_h = 2;
  m.grid_w = 2;
  m.input_dim = 6;
  m.model_dim = 8;
  m.embed_dim = 8;
  m.encoder_layers = 1;
  m.encoder_heads = 2;
  m.mtm_heads = 2;
  m.decoder_layers = 1;
  m.decoder_heads = 2;
  m.cbr_heads = 2;
  m.cbr_mtm_heads = 2;
  m.vocab_size = 10;
  m.max_caption_len = 6;
  c.variant = Variant::kScorerCbr;
  c.lambda_v = 0.1;
  c.lambda_m = 0.001;
  c.batch_size = 3;
  return c;
}

namespace {

struct Gen {
  std::mt19937_64 rng;
  explicit Gen(uint64_t seed) : rng(seed) {}

  Tensor normal(std::vector<size_t> dims, double sd = 1.0) {
    Tensor t(std::move(dims));
    std::normal_distribution<double> nd(0.0, sd);
    for (double& v : t.values()) v = nd(rng);
    return t;
  }
  /// Magnitudes in [0.1, 1] with random sign, keeping clear of relu's kink.
  Tensor away_from_zero(std::vector<size_t> dims) {
    Tensor t(std::move(dims));
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (double& v : t.values()) v = sign(rng) ? u(rng) : -u(rng);
    return t;
  }
};

/// Generic scalar readout: sum(out * R) with R fixed.
ad::Var readout(ad::Var out, const Tensor& r) {
  ad::Tape& t = *out.tape;
  return ad::sum(ad::mul(out, t.constant(r)));
}

using Fn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

Case op_case(std::string name, std::vector<Tensor> inputs, Tensor weights,
             std::function<ad::Var(const std::vector<ad::Var>&)> op) {
  Fn fn = [op, weights](ad::Tape&, const std::vector<ad::Var>& v) {
    ad::Var out = op(v);
    return out.value().size() == 1 ? ad::sum(out) : readout(out, weights);
  };
  return {std::move(name), std::move(inputs), std::move(fn)};
}

/// Loss cases over every parameter of the tiny model.
Case loss_case(const std::string& name, Gen& g) {
  const TrainConfig cfg = tiny_config();
  const ModelConfig& m = cfg.model;
  ParamStore store = init_params(m, g.rng());
  // Randomise gains and biases too so that no gradient path is trivially zero.
  for (const auto& n : store.names()) {
    for (double& v : store.get(n).values()) {
      std::normal_distribution<double> nd(0.0, 0.1);
      v += nd(g.rng);
    }
  }
  model::Batch batch;
  batch.size = cfg.batch_size;
  batch.raw_before = g.normal({batch.size * m.tokens(), m.input_dim});
  batch.raw_after = g.normal({batch.size * m.tokens(), m.input_dim});
  std::uniform_int_distribution<TokenId> word(kReservedTokens, m.vocab_size - 1);
  for (size_t b = 0; b < batch.size; ++b) {
    CaptionSeq c{kBos};
    for (size_t w = 0; w < 2 + b; ++w) c.push_back(word(g.rng));
    c.push_back(kEos);
    batch.captions.push_back(c);
  }
  std::vector<Tensor> inputs;
  for (const auto& n : store.names()) inputs.push_back(store.get(n));
  const std::vector<std::string> names = store.names();
  Fn fn = [cfg, batch, names, name](ad::Tape& tape, const std::vector<ad::Var>& v) {
    BoundParams p(tape, names, v);
    auto r = model::forward(batch, p, cfg);
    if (name == "L_cap") return r.cap;
    if (name == "L_cv") return r.cv;
    return r.cm;
  };
  return {name, std::move(inputs), std::move(fn)};
}

}  // namespace

std::vector<std::string> case_names() {
  return {"matmul",          "transpose",        "add",
          "sub",             "mul",              "scale",
          "add_row",         "linear",           "relu",
          "sum",             "mean",             "concat_cols",
          "slice_cols",      "mean_pool_rows",   "embedding_gather",
          "broadcast_rows",  "tile_rows",        "softmax_rows",
          "layer_norm",      "l2_normalize_rows", "cross_entropy",
          "segment_pool_mean", "segment_pool_max", "attention",
          "attention_causal", "multi_head_attention", "tm_matrix",
          "pairwise_dot",    "similarity_mtm",   "similarity_tm",
          "similarity_mean_pool", "similarity_max_pool", "info_nce",
          "l2_alignment",    "encoder",          "L_cap",
          "L_cv",            "L_cm"};
}

Case make_case(const std::string& name, uint64_t seed) {
  Gen g(seed);
  using V = std::vector<ad::Var>;
  if (name == "matmul") {
    return op_case(name, {g.normal({3, 4}), g.normal({4, 2})}, g.normal({3, 2}),
                   [](const V& v) { return ad::matmul(v[0], v[1]); });
  }
  if (name == "transpose") {
    return op_case(name, {g.normal({3, 4})}, g.normal({4, 3}),
                   [](const V& v) { return ad::transpose(v[0]); });
  }
  if (name == "add" || name == "sub" || name == "mul") {
    return op_case(name, {g.normal({3, 4}), g.normal({3, 4})}, g.normal({3, 4}),
                   [name](const V& v) {
                     if (name == "add") return ad::add(v[0], v[1]);
                     if (name == "sub") return ad::sub(v[0], v[1]);
                     return ad::mul(v[0], v[1]);
                   });
  }
  if (name == "scale") {
    return op_case(name, {g.normal({2, 5})}, g.normal({2, 5}),
                   [](const V& v) { return ad::scale(v[0], -1.7); });
  }
  if (name == "add_row") {
    return op_case(name, {g.normal({4, 3}), g.normal({3})}, g.normal({4, 3}),
                   [](const V& v) { return ad::add_row(v[0], v[1]); });
  }
  if (name == "linear") {
    return op_case(name, {g.normal({3, 4}), g.normal({4, 5}), g.normal({5})},
                   g.normal({3, 5}),
                   [](const V& v) { return ad::linear(v[0], v[1], v[2]); });
  }
  if (name == "relu") {
    return op_case(name, {g.away_from_zero({4, 5})}, g.normal({4, 5}),
                   [](const V& v) { return ad::relu(v[0]); });
  }
  if (name == "sum" || name == "mean") {
    return op_case(name, {g.normal({3, 4})}, Tensor(),
                   [name](const V& v) { return name == "sum" ? ad::sum(v[0]) : ad::mean(v[0]); });
  }
  if (name == "concat_cols") {
    return op_case(name, {g.normal({3, 2}), g.normal({3, 4})}, g.normal({3, 6}),
                   [](const V& v) { return ad::concat_cols(v[0], v[1]); });
  }
  if (name == "slice_cols") {
    return op_case(name, {g.normal({3, 5})}, g.normal({3, 2}),
                   [](const V& v) { return ad::slice_cols(v[0], 1, 2); });
  }
  if (name == "mean_pool_rows") {
    return op_case(name, {g.normal({4, 3})}, g.normal({3}),
                   [](const V& v) { return ad::mean_pool_rows(v[0]); });
  }
  if (name == "embedding_gather") {
    return op_case(name, {g.normal({5, 3})}, g.normal({4, 3}), [](const V& v) {
      const std::vector<int64_t> ids = {4, 0, 4, 2};
      return ad::embedding_gather(v[0], ids);
    });
  }
  if (name == "broadcast_rows") {
    return op_case(name, {g.normal({3})}, g.normal({4, 3}),
                   [](const V& v) { return ad::broadcast_rows(v[0], 4); });
  }
  if (name == "tile_rows") {
    return op_case(name, {g.normal({2, 3})}, g.normal({6, 3}),
                   [](const V& v) { return ad::tile_rows(v[0], 3); });
  }
  if (name == "softmax_rows") {
    return op_case(name, {g.normal({3, 5})}, g.normal({3, 5}),
                   [](const V& v) { return ad::softmax_rows(v[0]); });
  }
  if (name == "layer_norm") {
    return op_case(name, {g.normal({3, 5}), g.normal({5}), g.normal({5})},
                   g.normal({3, 5}),
                   [](const V& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  }
  if (name == "l2_normalize_rows") {
    return op_case(name, {g.normal({3, 6})}, g.normal({3, 6}),
                   [](const V& v) { return ad::l2_normalize_rows(v[0], 2); });
  }
  if (name == "cross_entropy") {
    return op_case(name, {g.normal({4, 5})}, Tensor(), [](const V& v) {
      const std::vector<int64_t> targets = {1, 0, 4, 2};
      return ad::cross_entropy_with_logits(v[0], targets, int64_t{0});
    });
  }
  if (name == "segment_pool_mean" || name == "segment_pool_max") {
    const auto mode = name == "segment_pool_mean" ? ad::PoolMode::kMean : ad::PoolMode::kMax;
    return op_case(name, {g.normal({6, 4})}, g.normal({2, 4}),
                   [mode](const V& v) { return ad::segment_pool(v[0], 2, mode); });
  }
  if (name == "attention" || name == "attention_causal") {
    const bool causal = name == "attention_causal";
    return op_case(name, {g.normal({6, 4}), g.normal({6, 4}), g.normal({6, 4})},
                   g.normal({6, 4}), [causal](const V& v) {
                     return ad::attention_core(v[0], v[1], v[2], {2, 2, causal});
                   });
  }
  if (name == "multi_head_attention") {
    std::vector<Tensor> in = {g.normal({3, 4}), g.normal({5, 4})};
    for (int i = 0; i < 4; ++i) {
      in.push_back(g.normal({4, 4}, 0.5));
      in.push_back(g.normal({4}, 0.1));
    }
    return op_case(name, std::move(in), g.normal({3, 4}), [](const V& v) {
      nn::AttentionParams p{v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9]};
      return nn::multi_head_attention(v[0], v[1], v[1], p, {2, 1, false});
    });
  }
  if (name == "tm_matrix") {
    return op_case(name, {g.normal({9, 4}), g.normal({9, 4})}, g.normal({3, 3}),
                   [](const V& v) { return similarity::tm_matrix(v[0], v[1], 3, 2); });
  }
  if (name == "pairwise_dot") {
    return op_case(name, {g.normal({3, 4}), g.normal({3, 4})}, g.normal({3, 3}),
                   [](const V& v) { return similarity::pairwise_dot(v[0], v[1]); });
  }
  if (name.rfind("similarity_", 0) == 0) {
    similarity::AlignmentConfig ac;
    ac.sim_mode = similarity::parse_sim_mode(
        name == "similarity_mean_pool"  ? "mean-pool"
        : name == "similarity_max_pool" ? "max-pool"
                                        : name.substr(11));
    return op_case(name,
                   {g.normal({9, 4}), g.normal({9, 4}), g.normal({4, 4}), g.normal({4, 4})},
                   g.normal({3, 3}), [ac](const V& v) {
                     return similarity::batch_similarity(v[0], v[1], 3, ac,
                                                         {v[2], v[3], 2});
                   });
  }
  if (name == "info_nce") {
    return op_case(name, {g.normal({3, 3})}, Tensor(),
                   [](const V& v) { return similarity::info_nce(v[0], 0.5); });
  }
  if (name == "l2_alignment") {
    return op_case(name, {g.normal({6, 4}), g.normal({6, 4})}, Tensor(),
                   [](const V& v) { return similarity::l2_alignment(v[0], v[1], 2); });
  }
  if (name == "encoder") {
    // Scalar readout of the difference representation vs both raw grids.
    const TrainConfig cfg = tiny_config();
    ParamStore store = init_params(cfg.model, g.rng());
    const auto n = cfg.model.tokens();
    const Tensor w = g.normal({2 * n, cfg.model.model_dim});
    Fn fn = [cfg, store, w](ad::Tape& tape, const V& v) {
      BoundParams p(tape, store, false);
      auto enc = encoder::encode_pair(v[0], v[1], p, cfg.model, Variant::kScorer, 2);
      return readout(enc.difference, w);
    };
    return {name,
            {g.normal({2 * n, cfg.model.input_dim}), g.normal({2 * n, cfg.model.input_dim})},
            std::move(fn)};
  }
  if (name == "L_cap" || name == "L_cv" || name == "L_cm") return loss_case(name, g);
  throw std::invalid_argument("unknown gradcheck case '" + name + "'");
}

}  // namespace scorer::gradcheck
