#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <string_view>
#include <vector>

#include "scorer/tensor.hpp"
#include "scorer/vocab.hpp"

namespace scorer::changeworld {

enum class Shape : uint8_t { kCube, kSphere, kCylinder };
enum class Color : uint8_t { kRed, kBlue, kGreen, kYellow };
enum class Material : uint8_t { kRubber, kMetal };

inline constexpr size_t kShapes = 3;
inline constexpr size_t kColors = 4;
inline constexpr size_t kMaterials = 2;

std::string_view name(Shape s);
std::string_view name(Color c);
std::string_view name(Material m);

struct Cell {
  bool occupied = false;
  Shape shape = Shape::kCube;
  Color color = Color::kRed;
  Material material = Material::kRubber;

  /// Attributes only count for occupied cells.
  bool operator==(const Cell& o) const {
    if (occupied != o.occupied) return false;
    return !occupied ||
           (shape == o.shape && color == o.color && material == o.material);
  }
};

enum class ChangeType : uint8_t { kColor, kTexture, kAdd, kDrop, kMove, kDistractor };
inline constexpr size_t kChangeTypes = 6;

std::string_view name(ChangeType t);
ChangeType parse_change_type(std::string_view s);

/// Before/after scenes of one example. `after` is `before` with the change
/// applied, then cyclically shifted by (dy, dx).
struct ScenePair {
  uint64_t id = 0;
  size_t height = 0;
  size_t width = 0;
  std::vector<Cell> before;
  std::vector<Cell> after;
  ChangeType change = ChangeType::kDistractor;
  std::optional<size_t> changed_before;  // cell index in the before frame
  std::optional<size_t> changed_after;   // cell index in the after frame
  int view_dy = 0;
  int view_dx = 0;
  uint64_t seed = 0;  // per-pair noise seed
  std::vector<std::string> caption;

  size_t cells() const { return height * width; }
  /// After-frame index of before-frame cell i.
  size_t shift(size_t i) const;
  /// Before-frame index of after-frame cell i.
  size_t unshift(size_t i) const;
  /// The after scene mapped back into the before frame.
  std::vector<Cell> after_in_before_frame() const;

  bool operator==(const ScenePair&) const = default;
};

struct GeneratorConfig {
  size_t height = 4;
  size_t width = 4;
  size_t min_objects = 2;
  size_t max_objects = 5;
  double distractor_rate = 0.2;
  /// Largest cyclic view shift per axis (see draw_view_offset).
  size_t max_view_shift = 1;
  /// Relative weights of color, texture, add, drop, move.
  std::array<double, 5> semantic_weights{1, 1, 1, 1, 1};
  size_t max_retries = 64;
};

/// Deterministic in (seed, cfg). Throws std::runtime_error when the drawn
/// change cannot be realised within cfg.max_retries scene draws.
ScenePair generate_pair(uint64_t seed, const GeneratorConfig& cfg,
                        std::optional<ChangeType> forced = std::nullopt);

/// Pair i uses a seed derived from (seed, i); ids are 0..count-1.
std::vector<ScenePair> generate_dataset(size_t count, uint64_t seed,
                                        const GeneratorConfig& cfg);

/// Template caption; a "next to the <color> <shape>" referent clause is
/// appended when another object shares the changed object's color and shape.
std::vector<std::string> caption_for(const ScenePair& pair);

/// Every word the caption grammar can emit, in id order.
Vocabulary grammar_vocabulary();

/// Fixed attribute embeddings plus the noise scale used to turn symbolic
/// cells into feature tokens.
struct RenderSpec {
  size_t input_dim = 32;
  /// Expected L2 norm of the per-token noise vector.
  double noise = 0.05;
  Tensor shape_embedding;     // [3 x input_dim]
  Tensor color_embedding;     // [4 x input_dim]
  Tensor material_embedding;  // [2 x input_dim]

  static RenderSpec create(uint64_t seed, size_t input_dim, double noise);
  /// Noise-free feature of one cell (zero when empty).
  std::vector<double> embed(const Cell& cell) const;
};

/// [cells x input_dim]: attribute embedding sum per cell plus i.i.d. Gaussian
/// noise drawn from `noise_seed`.
Tensor render_features(std::span<const Cell> cells, const RenderSpec& spec,
                       uint64_t noise_seed);

/// Uniform over the non-identity cyclic offsets (dy, dx) with |dy|, |dx| <=
/// max_shift (mod grid size), each in [0, height) x [0, width). A 1x1 grid
/// only has (0, 0).
std::pair<int, int> draw_view_offset(uint64_t seed, size_t height, size_t width,
                                     size_t max_shift);

/// The same symbolic pair seen from another viewpoint: `after` re-shifted by
/// (dy, dx) instead of the stored offset, with `seed` as the new noise seed.
ScenePair reframe(const ScenePair& pair, int dy, int dx, uint64_t seed);

/// Noise seeds of the two views of a pair.
uint64_t view_seed(const ScenePair& pair, bool after);

/// JSON Lines, one pair per line; the vocabulary is written next to the
/// dataset (same stem, ".vocab" extension).
void write_dataset(std::span<const ScenePair> pairs,
                   const std::filesystem::path& path);
std::vector<ScenePair> read_dataset(const std::filesystem::path& path);
std::filesystem::path vocabulary_path(const std::filesystem::path& dataset);

std::string to_json_line(const ScenePair& pair);
/// Throws std::runtime_error naming `line_number` on malformed input.
ScenePair from_json_line(std::string_view line, size_t line_number);

uint64_t derive_seed(uint64_t seed, uint64_t stream);

}  // namespace scorer::changeworld
