#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>

#include "scorer/similarity.hpp"

namespace scorer {

/// Thrown for malformed or out-of-contract configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Variant { kSubtraction, kRr, kScorer, kRrCbr, kScorerCbr };

Variant parse_variant(std::string_view s);
std::string to_string(Variant v);
bool uses_reconstruction(Variant v);
bool uses_view_alignment(Variant v);
bool uses_cbr(Variant v);

/// Architecture widths and depths.
struct ModelConfig {
  size_t grid_h = 4;
  size_t grid_w = 4;
  size_t input_dim = 32;
  size_t model_dim = 64;
  size_t embed_dim = 64;
  size_t encoder_layers = 1;
  size_t encoder_heads = 4;
  size_t mtm_heads = 4;
  size_t decoder_layers = 1;
  size_t decoder_heads = 4;
  size_t cbr_heads = 4;
  size_t cbr_mtm_heads = 4;
  size_t vocab_size = 27;
  size_t max_caption_len = 16;

  size_t tokens() const { return grid_h * grid_w; }
  /// Decoder steps: captions of at most max_caption_len ids (BOS..EOS).
  size_t decoder_steps() const { return max_caption_len - 1; }
  void validate() const;
};

struct TrainConfig {
  ModelConfig model;
  Variant variant = Variant::kScorerCbr;
  double lambda_v = 0.1;
  double lambda_m = 0.001;
  similarity::AlignmentConfig alignment;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  size_t batch_size = 32;
  size_t iterations = 3000;
  uint64_t seed = 1;
  size_t checkpoint_interval = 0;
  /// Feature rendering of the change-world: attribute embedding seed and
  /// expected per-token noise norm.
  uint64_t render_seed = 0;
  double render_noise = 0.05;
  /// Re-render every sampled training pair from a fresh random viewpoint
  /// (offset and noise) each iteration. Fixed batches are never reframed.
  bool augment_views = true;
  /// Largest per-axis cyclic shift of an augmented view.
  size_t view_shift = 1;

  /// Copy with variant gating applied: lambda_m = 0 without CBR, lambda_v = 0
  /// for subtraction/rr.
  TrainConfig effective() const;
  void validate() const;

  /// Applies one key=value assignment; unknown keys throw ConfigError.
  void set(std::string_view key, std::string_view value);
  std::map<std::string, std::string> to_map() const;
};

/// Named presets: "desk" and "clevr-change" (14x14 grids, D=512, batch 128).
TrainConfig preset(std::string_view name);

/// Parses flat key=value text. '#' starts a comment; blank lines are skipped.
TrainConfig parse_config(std::istream& in, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});

/// Effective-config block: one key=value per line, sorted by key, readable by
/// parse_config.
std::string format_config(const TrainConfig& cfg);

}  // namespace scorer
