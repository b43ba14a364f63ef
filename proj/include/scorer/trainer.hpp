#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "scorer/adam.hpp"
#include "scorer/model.hpp"

namespace scorer::trainer {

/// Raised when the loss or a forward value stops being finite.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossRecord {
  size_t iter = 0;
  double total = 0.0;
  double cap = 0.0;
  double cv = 0.0;
  double cm = 0.0;
};

/// Seeded batch order: walks a shuffled permutation of the dataset, and
/// reshuffles when fewer than `batch` items remain, so no batch repeats a pair.
class BatchSampler {
 public:
  BatchSampler(size_t dataset_size, size_t batch, uint64_t seed);
  std::vector<size_t> next();

 private:
  size_t n_;
  size_t batch_;
  std::mt19937_64 rng_;
  std::vector<size_t> order_;
  size_t pos_ = 0;
};

struct TrainOptions {
  /// Final checkpoint (also written every cfg.checkpoint_interval iterations,
  /// as <stem>.iter<k><ext>).
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> metrics_csv;
  /// Starting parameters; init_params(cfg.model, cfg.seed) when absent.
  std::optional<ParamStore> init;
  /// Fixed batch used for every iteration instead of the sampler.
  std::optional<std::vector<size_t>> fixed_batch;
  std::function<void(const LossRecord&)> on_iteration;
};

struct TrainResult {
  ParamStore params;
  std::vector<LossRecord> history;
};

/// One forward/backward/Adam update.
LossRecord train_step(const model::Batch& batch, ParamStore& params,
                      AdamState& adam, const TrainConfig& cfg);

TrainResult train(const model::RenderedDataset& data, const TrainConfig& cfg,
                  const TrainOptions& options = {});

/// Loss components of one batch without updating anything.
LossRecord evaluate_losses(const model::Batch& batch, const ParamStore& params,
                           const TrainConfig& cfg);

void write_loss_csv_header(std::ostream& out);
void write_loss_csv_row(std::ostream& out, const LossRecord& r);

}  // namespace scorer::trainer
