#include "scorer/model.hpp"

#include <algorithm>

#include "scorer/cbr.hpp"
#include "scorer/similarity.hpp"

namespace scorer::model {

RenderedDataset RenderedDataset::build(std::vector<changeworld::ScenePair> pairs,
                                       Vocabulary vocab, const TrainConfig& cfg) {
  const ModelConfig& m = cfg.model;
  if (vocab.size() > m.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) +
                      " ids but vocab_size is " + std::to_string(m.vocab_size));
  }
  const auto spec =
      changeworld::RenderSpec::create(cfg.render_seed, m.input_dim, cfg.render_noise);
  RenderedDataset d;
  d.vocab = std::move(vocab);
  for (const auto& p : pairs) {
    if (p.height != m.grid_h || p.width != m.grid_w) {
      throw ConfigError("pair " + std::to_string(p.id) + " has a " +
                        std::to_string(p.height) + "x" + std::to_string(p.width) +
                        " grid but the model expects " + std::to_string(m.grid_h) +
                        "x" + std::to_string(m.grid_w));
    }
    CaptionSeq c = d.vocab.encode(p.caption);
    validate_caption(c, m.max_caption_len, m.vocab_size);
    d.before.push_back(
        changeworld::render_features(p.before, spec, changeworld::view_seed(p, false)));
    d.after.push_back(
        changeworld::render_features(p.after, spec, changeworld::view_seed(p, true)));
    d.captions.push_back(std::move(c));
  }
  d.pairs = std::move(pairs);
  d.spec = spec;
  return d;
}

Batch make_batch(const RenderedDataset& data, std::span<const size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const size_t n = data.before.at(indices[0]).rows();
  const size_t din = data.before.at(indices[0]).cols();
  Batch b;
  b.size = indices.size();
  b.raw_before = Tensor({b.size * n, din});
  b.raw_after = Tensor({b.size * n, din});
  for (size_t k = 0; k < b.size; ++k) {
    const size_t i = indices[k];
    const auto& src_b = data.before.at(i).storage();
    const auto& src_a = data.after.at(i).storage();
    std::copy(src_b.begin(), src_b.end(), b.raw_before.storage().begin() + k * n * din);
    std::copy(src_a.begin(), src_a.end(), b.raw_after.storage().begin() + k * n * din);
    b.captions.push_back(data.captions[i]);
  }
  return b;
}

Batch make_reframed_batch(const RenderedDataset& data, std::span<const size_t> indices,
                          uint64_t seed, size_t max_shift) {
  if (indices.empty()) throw std::invalid_argument("make_reframed_batch: empty batch");
  const size_t n = data.before.at(indices[0]).rows();
  const size_t din = data.before.at(indices[0]).cols();
  Batch b;
  b.size = indices.size();
  b.raw_before = Tensor({b.size * n, din});
  b.raw_after = Tensor({b.size * n, din});
  for (size_t k = 0; k < b.size; ++k) {
    const auto& src = data.pairs.at(indices[k]);
    const uint64_t s = changeworld::derive_seed(seed, k);
    const auto [dy, dx] =
        changeworld::draw_view_offset(changeworld::derive_seed(s, 1), src.height, src.width, max_shift);
    const auto p = changeworld::reframe(src, dy, dx, changeworld::derive_seed(s, 2));
    const auto before = changeworld::render_features(p.before, data.spec, changeworld::view_seed(p, false));
    const auto after = changeworld::render_features(p.after, data.spec, changeworld::view_seed(p, true));
    std::copy(before.storage().begin(), before.storage().end(), b.raw_before.storage().begin() + k * n * din);
    std::copy(after.storage().begin(), after.storage().end(), b.raw_after.storage().begin() + k * n * din);
    b.captions.push_back(data.captions[indices[k]]);
  }
  return b;
}

double total_loss(double cap, double cv, double cm, double lambda_v,
                  double lambda_m) {
  double l = cap;
  if (lambda_v != 0.0) l += lambda_v * cv;
  if (lambda_m != 0.0) l += lambda_m * cm;
  return l;
}

ad::Var total_loss(ad::Var cap, ad::Var cv, ad::Var cm, double lambda_v,
                   double lambda_m) {
  ad::Var l = cap;
  if (lambda_v != 0.0) l = ad::add(l, ad::scale(cv, lambda_v));
  if (lambda_m != 0.0) l = ad::add(l, ad::scale(cm, lambda_m));
  return l;
}

namespace {

size_t longest_caption(const std::vector<CaptionSeq>& captions) {
  size_t steps = 1;
  for (const auto& c : captions) steps = std::max(steps, c.size() - 1);
  return steps;
}

}  // namespace

ForwardResult forward(const Batch& batch, const BoundParams& p,
                      const TrainConfig& raw_cfg, bool record_attention) {
  const TrainConfig cfg = raw_cfg.effective();
  ad::Tape& tape = p.tape();
  ForwardResult r;
  ad::Var rb = tape.constant(batch.raw_before);
  ad::Var ra = tape.constant(batch.raw_after);
  r.encoding = encoder::encode_pair(rb, ra, p, cfg.model, cfg.variant, batch.size,
                                    record_attention);
  r.captions = decoder::CaptionBatch::from(batch.captions, longest_caption(batch.captions),
                                           cfg.model.vocab_size);
  r.decoding = decoder::decode_teacher_forced(r.encoding.difference, r.captions, p,
                                              cfg.model, record_attention);
  r.cap = decoder::caption_nll(r.decoding.logits, r.captions);
  if (cfg.lambda_v != 0.0) {
    similarity::MtmWeights w{p["mtm.wq"], p["mtm.wk"], cfg.model.mtm_heads};
    r.cv = similarity::alignment_loss(r.encoding.before, r.encoding.after, batch.size,
                                      cfg.alignment, w);
  }
  if (cfg.lambda_m != 0.0) {
    r.cm = cbr::backward_reasoning_loss(r.encoding.before, r.encoding.after,
                                        r.decoding.states, r.captions, p, cfg.model,
                                        cfg.alignment);
  }
  r.total = total_loss(r.cap, r.cv, r.cm, cfg.lambda_v, cfg.lambda_m);
  return r;
}

Tensor difference_grid(const Batch& batch, const ParamStore& params,
                       const TrainConfig& cfg) {
  ad::Tape tape;
  BoundParams p(tape, params, false);
  auto enc = encoder::encode_pair(tape.constant(batch.raw_before),
                                  tape.constant(batch.raw_after), p, cfg.model,
                                  cfg.variant, batch.size);
  return enc.difference.value();
}

}  // namespace scorer::model
