#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "scorer/autodiff.hpp"
#include "scorer/config.hpp"
#include "scorer/tensor.hpp"

namespace scorer {

/// Thrown on unreadable, corrupt, or incompatible checkpoints.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered collection of named parameter tensors.
class ParamStore {
 public:
  void add(std::string name, Tensor value);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  const std::vector<std::string>& names() const { return order_; }
  size_t size() const { return order_.size(); }
  size_t scalar_count() const;

  bool operator==(const ParamStore& other) const;

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> tensors_;
};

/// Parameters placed on a tape, either as trainable variables or constants.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamStore& store, bool trainable);
  /// Binds already-recorded vars under the given names.
  BoundParams(ad::Tape& tape, const std::vector<std::string>& names,
              const std::vector<ad::Var>& vars);

  ad::Var operator[](const std::string& name) const;
  ad::Tape& tape() const { return *tape_; }

  /// Gradients after tape.backward(), in store order.
  ParamStore gradients(const ParamStore& store) const;

 private:
  ad::Tape* tape_;
  std::unordered_map<std::string, ad::Var> vars_;
};

enum class InitKind { kWeight, kBias, kGain, kTable };

struct ParamSpec {
  std::string name;
  std::vector<size_t> dims;
  InitKind init;
};

/// Every parameter the architecture owns, in a stable order. The set depends
/// only on the model config, never on the training variant.
std::vector<ParamSpec> param_specs(const ModelConfig& cfg);

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and LN beta 0; LN
/// gamma 1; embedding and position tables ~ N(0, 0.02^2).
ParamStore init_params(const ModelConfig& cfg, uint64_t seed);

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path);
ParamStore load_checkpoint(const std::filesystem::path& path);

/// Throws CheckpointError naming the first parameter that is missing or has
/// dims different from what `cfg` requires.
void check_compatible(const ParamStore& params, const ModelConfig& cfg);

inline constexpr std::string_view kCheckpointMagic = "SCORERCKPT1";

}  // namespace scorer
