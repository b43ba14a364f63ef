#include "scorer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "scorer/changeworld.hpp"

namespace scorer::trainer {

BatchSampler::BatchSampler(size_t dataset_size, size_t batch, uint64_t seed)
    : n_(dataset_size), batch_(batch), rng_(seed), order_(dataset_size) {
  if (batch == 0 || batch > dataset_size) {
    throw std::invalid_argument("batch size " + std::to_string(batch) +
                                " does not fit a dataset of " +
                                std::to_string(dataset_size));
  }
  std::iota(order_.begin(), order_.end(), size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
}

std::vector<size_t> BatchSampler::next() {
  if (pos_ + batch_ > n_) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::vector<size_t> out(order_.begin() + static_cast<long>(pos_),
                          order_.begin() + static_cast<long>(pos_ + batch_));
  pos_ += batch_;
  return out;
}

namespace {

double value_or_zero(const ad::Var& v) { return v ? v.value().item() : 0.0; }

LossRecord record_of(const model::ForwardResult& r) {
  LossRecord rec;
  rec.total = r.total.value().item();
  rec.cap = r.cap.value().item();
  rec.cv = value_or_zero(r.cv);
  rec.cm = value_or_zero(r.cm);
  return rec;
}

}  // namespace

LossRecord train_step(const model::Batch& batch, ParamStore& params,
                      AdamState& adam, const TrainConfig& cfg) {
  LossRecord rec;
  ParamStore grads;
  try {
    ad::Tape tape;
    BoundParams bound(tape, params, true);
    auto r = model::forward(batch, bound, cfg);
    rec = record_of(r);
    tape.backward(r.total);
    grads = bound.gradients(params);
  } catch (const NumericalError& e) {
    throw DivergenceError(std::string("training diverged: ") + e.what());
  }
  if (!std::isfinite(rec.total)) throw DivergenceError("training diverged: loss is not finite");
  adam.step(params, grads);
  return rec;
}

LossRecord evaluate_losses(const model::Batch& batch, const ParamStore& params,
                           const TrainConfig& cfg) {
  ad::Tape tape;
  BoundParams bound(tape, params, false);
  return record_of(model::forward(batch, bound, cfg));
}

void write_loss_csv_header(std::ostream& out) { out << "iter,L_total,L_cap,L_cv,L_cm\n"; }

void write_loss_csv_row(std::ostream& out, const LossRecord& r) {
  out.precision(17);
  out << r.iter << ',' << r.total << ',' << r.cap << ',' << r.cv << ',' << r.cm << '\n';
}

namespace {

std::filesystem::path interval_path(const std::filesystem::path& p, size_t iter) {
  std::filesystem::path out = p;
  out.replace_filename(p.stem().string() + ".iter" + std::to_string(iter) +
                       p.extension().string());
  return out;
}

}  // namespace

TrainResult train(const model::RenderedDataset& data, const TrainConfig& raw_cfg,
                  const TrainOptions& options) {
  const TrainConfig cfg = raw_cfg.effective();
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");

  TrainResult res;
  res.params = options.init ? *options.init
                            : init_params(cfg.model, changeworld::derive_seed(cfg.seed, 1));
  check_compatible(res.params, cfg.model);
  AdamState adam(res.params, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps});

  std::ofstream csv;
  if (options.metrics_csv) {
    csv.open(*options.metrics_csv, std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + options.metrics_csv->string());
    write_loss_csv_header(csv);
  }

  std::optional<BatchSampler> sampler;
  std::optional<model::Batch> fixed;
  if (options.fixed_batch) {
    fixed = model::make_batch(data, *options.fixed_batch);
  } else {
    sampler.emplace(data.size(), std::min(cfg.batch_size, data.size()),
                    changeworld::derive_seed(cfg.seed, 2));
  }

  const uint64_t view_stream = changeworld::derive_seed(cfg.seed, 3);
  for (size_t it = 1; it <= cfg.iterations; ++it) {
    LossRecord rec;
    if (fixed) {
      rec = train_step(*fixed, res.params, adam, cfg);
    } else {
      const auto idx = sampler->next();
      const auto batch = cfg.augment_views
                             ? model::make_reframed_batch(data, idx, changeworld::derive_seed(view_stream, it),
                                                        cfg.view_shift)
                             : model::make_batch(data, idx);
      rec = train_step(batch, res.params, adam, cfg);
    }
    rec.iter = it;
    res.history.push_back(rec);
    if (csv.is_open()) write_loss_csv_row(csv, rec);
    if (options.on_iteration) options.on_iteration(rec);
    if (options.checkpoint && cfg.checkpoint_interval > 0 &&
        it % cfg.checkpoint_interval == 0 && it != cfg.iterations) {
      save_checkpoint(res.params, interval_path(*options.checkpoint, it));
    }
  }
  if (options.checkpoint) save_checkpoint(res.params, *options.checkpoint);
  return res;
}

}  // namespace scorer::trainer
