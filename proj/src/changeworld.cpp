#include "scorer/changeworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>
#include <tuple>

#include "json.hpp"

namespace scorer::changeworld {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, kShapes> kShapeNames = {"cube", "sphere",
                                                               "cylinder"};
constexpr std::array<std::string_view, kColors> kColorNames = {"red", "blue",
                                                               "green", "yellow"};
constexpr std::array<std::string_view, kMaterials> kMaterialNames = {"rubber",
                                                                     "metal"};
constexpr std::array<std::string_view, kChangeTypes> kChangeNames = {
    "color", "texture", "add", "drop", "move", "distractor"};

template <size_t N>
size_t lookup(const std::array<std::string_view, N>& names, std::string_view s,
              std::string_view what) {
  for (size_t i = 0; i < N; ++i) {
    if (names[i] == s) return i;
  }
  throw std::invalid_argument("unknown " + std::string(what) + " '" +
                              std::string(s) + "'");
}

size_t pick(std::mt19937_64& rng, size_t n) {
  return std::uniform_int_distribution<size_t>(0, n - 1)(rng);
}

Cell random_object(std::mt19937_64& rng) {
  Cell c;
  c.occupied = true;
  c.shape = static_cast<Shape>(pick(rng, kShapes));
  c.color = static_cast<Color>(pick(rng, kColors));
  c.material = static_cast<Material>(pick(rng, kMaterials));
  return c;
}

std::vector<size_t> cells_where(const std::vector<Cell>& cells, bool occupied) {
  std::vector<size_t> out;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (cells[i].occupied == occupied) out.push_back(i);
  }
  return out;
}

std::vector<std::string> describe(const Cell& c) {
  return {std::string(name(c.color)), std::string(name(c.shape))};
}

bool same_kind(const Cell& a, const Cell& b) {
  return a.occupied && b.occupied && a.color == b.color && a.shape == b.shape;
}

}  // namespace

std::string_view name(Shape s) { return kShapeNames[static_cast<size_t>(s)]; }
std::string_view name(Color c) { return kColorNames[static_cast<size_t>(c)]; }
std::string_view name(Material m) { return kMaterialNames[static_cast<size_t>(m)]; }
std::string_view name(ChangeType t) { return kChangeNames[static_cast<size_t>(t)]; }

ChangeType parse_change_type(std::string_view s) {
  return static_cast<ChangeType>(lookup(kChangeNames, s, "change type"));
}

uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 over a combined state.
  uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

size_t ScenePair::shift(size_t i) const {
  const size_t y = (i / width + static_cast<size_t>(view_dy)) % height;
  const size_t x = (i % width + static_cast<size_t>(view_dx)) % width;
  return y * width + x;
}

size_t ScenePair::unshift(size_t i) const {
  const size_t y = (i / width + height - static_cast<size_t>(view_dy)) % height;
  const size_t x = (i % width + width - static_cast<size_t>(view_dx)) % width;
  return y * width + x;
}

std::vector<Cell> ScenePair::after_in_before_frame() const {
  std::vector<Cell> out(cells());
  for (size_t i = 0; i < cells(); ++i) out[i] = after[shift(i)];
  return out;
}

ScenePair generate_pair(uint64_t seed, const GeneratorConfig& cfg,
                        std::optional<ChangeType> forced) {
  const size_t n = cfg.height * cfg.width;
  if (n == 0 || cfg.min_objects < 1 || cfg.min_objects > cfg.max_objects ||
      cfg.max_objects > n) {
    throw std::invalid_argument("generate_pair: invalid object count range");
  }
  std::mt19937_64 rng(seed);
  ChangeType type;
  if (forced) {
    type = *forced;
  } else if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) <
             cfg.distractor_rate) {
    type = ChangeType::kDistractor;
  } else {
    std::discrete_distribution<size_t> d(cfg.semantic_weights.begin(),
                                         cfg.semantic_weights.end());
    type = static_cast<ChangeType>(d(rng));
  }

  ScenePair p;
  p.height = cfg.height;
  p.width = cfg.width;
  p.change = type;
  for (size_t attempt = 0;; ++attempt) {
    if (attempt == cfg.max_retries) {
      throw std::runtime_error("generate_pair: could not realise a '" +
                               std::string(name(type)) + "' change in " +
                               std::to_string(cfg.max_retries) + " draws");
    }
    const size_t count =
        cfg.min_objects + pick(rng, cfg.max_objects - cfg.min_objects + 1);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    p.before.assign(n, Cell{});
    for (size_t k = 0; k < count; ++k) p.before[order[k]] = random_object(rng);
    const auto occupied = cells_where(p.before, true);
    const auto empty = cells_where(p.before, false);
    const bool needs_empty = type == ChangeType::kAdd || type == ChangeType::kMove;
    const bool needs_pair = type == ChangeType::kMove || type == ChangeType::kDrop;
    if ((needs_empty && empty.empty()) || (needs_pair && occupied.size() < 2)) {
      continue;
    }
    std::vector<Cell> changed = p.before;
    p.changed_before.reset();
    p.changed_after.reset();
    switch (type) {
      case ChangeType::kColor: {
        const size_t i = occupied[pick(rng, occupied.size())];
        const size_t offset = 1 + pick(rng, kColors - 1);
        changed[i].color = static_cast<Color>(
            (static_cast<size_t>(changed[i].color) + offset) % kColors);
        p.changed_before = i;
        p.changed_after = i;
        break;
      }
      case ChangeType::kTexture: {
        const size_t i = occupied[pick(rng, occupied.size())];
        changed[i].material = changed[i].material == Material::kRubber
                                  ? Material::kMetal
                                  : Material::kRubber;
        p.changed_before = i;
        p.changed_after = i;
        break;
      }
      case ChangeType::kAdd: {
        const size_t i = empty[pick(rng, empty.size())];
        changed[i] = random_object(rng);
        p.changed_before = i;
        p.changed_after = i;
        break;
      }
      case ChangeType::kDrop: {
        const size_t i = occupied[pick(rng, occupied.size())];
        changed[i] = Cell{};
        p.changed_before = i;
        p.changed_after = i;
        break;
      }
      case ChangeType::kMove: {
        const size_t from = occupied[pick(rng, occupied.size())];
        const size_t to = empty[pick(rng, empty.size())];
        changed[to] = changed[from];
        changed[from] = Cell{};
        p.changed_before = from;
        p.changed_after = to;
        break;
      }
      case ChangeType::kDistractor:
        break;
    }
    std::tie(p.view_dy, p.view_dx) =
        draw_view_offset(rng(), cfg.height, cfg.width, cfg.max_view_shift);
    p.after.assign(n, Cell{});
    for (size_t i = 0; i < n; ++i) p.after[p.shift(i)] = changed[i];
    if (p.changed_after) p.changed_after = p.shift(*p.changed_after);
    break;
  }
  p.seed = rng();
  p.caption = caption_for(p);
  return p;
}

std::vector<ScenePair> generate_dataset(size_t count, uint64_t seed,
                                        const GeneratorConfig& cfg) {
  std::vector<ScenePair> out;
  out.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    ScenePair p = generate_pair(derive_seed(seed, i), cfg);
    p.id = i;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::string> caption_for(const ScenePair& pair) {
  if (pair.change == ChangeType::kDistractor) {
    return {"no", "change", "was", "made"};
  }
  if (!pair.changed_before || !pair.changed_after) {
    throw std::invalid_argument("caption_for: semantic change without cells");
  }
  const size_t src = *pair.changed_before;
  const std::vector<Cell> after = pair.after_in_before_frame();
  // The object the caption talks about, with its "before" attributes (or the
  // added object's attributes).
  const Cell subject = pair.change == ChangeType::kAdd ? after[src] : pair.before[src];

  std::vector<std::string> words;
  auto append = [&words](const std::vector<std::string>& w) {
    words.insert(words.end(), w.begin(), w.end());
  };
  switch (pair.change) {
    case ChangeType::kColor:
      append({"the"});
      append(describe(subject));
      append({"changed", "to", std::string(name(after[src].color))});
      break;
    case ChangeType::kTexture:
      append({"the"});
      append(describe(subject));
      append({"changed", "to", std::string(name(after[src].material))});
      break;
    case ChangeType::kAdd:
      append({"a"});
      append(describe(subject));
      append({"has", "been", "added"});
      break;
    case ChangeType::kDrop:
      append({"the"});
      append(describe(subject));
      append({"has", "disappeared"});
      break;
    case ChangeType::kMove:
      append({"the"});
      append(describe(subject));
      append({"moved"});
      break;
    case ChangeType::kDistractor:
      break;
  }

  // Referent clause when another object in the before scene is a twin.
  bool ambiguous = false;
  for (size_t i = 0; i < pair.before.size(); ++i) {
    if (i != src && same_kind(pair.before[i], subject)) ambiguous = true;
  }
  if (!ambiguous) return words;
  const auto distance = [&](size_t i) {
    const auto dy = static_cast<long>(i / pair.width) - static_cast<long>(src / pair.width);
    const auto dx = static_cast<long>(i % pair.width) - static_cast<long>(src % pair.width);
    return std::labs(dy) + std::labs(dx);
  };
  std::optional<size_t> best;
  std::optional<size_t> best_twin;
  for (size_t i = 0; i < pair.before.size(); ++i) {
    if (i == src || !pair.before[i].occupied) continue;
    auto& slot = same_kind(pair.before[i], subject) ? best_twin : best;
    if (!slot || distance(i) < distance(*slot)) slot = i;
  }
  const size_t ref = best ? *best : *best_twin;
  append({"next", "to", "the"});
  append(describe(pair.before[ref]));
  return words;
}

Vocabulary grammar_vocabulary() {
  std::vector<std::string> words = {"the",  "a",      "changed", "to",
                                    "has",  "been",   "added",   "disappeared",
                                    "moved", "no",    "change",  "was",
                                    "made", "next"};
  for (auto c : kColorNames) words.emplace_back(c);
  for (auto s : kShapeNames) words.emplace_back(s);
  for (auto m : kMaterialNames) words.emplace_back(m);
  return Vocabulary(std::move(words));
}

RenderSpec RenderSpec::create(uint64_t seed, size_t input_dim, double noise) {
  if (input_dim == 0) throw std::invalid_argument("RenderSpec: input_dim must be > 0");
  if (noise < 0.0) throw std::invalid_argument("RenderSpec: noise must be >= 0");
  RenderSpec spec;
  spec.input_dim = input_dim;
  spec.noise = noise;
  std::mt19937_64 rng(derive_seed(seed, 0xE1));
  std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
  auto table = [&](size_t rows) {
    Tensor t({rows, input_dim});
    for (double& v : t.values()) v = nd(rng);
    return t;
  };
  spec.shape_embedding = table(kShapes);
  spec.color_embedding = table(kColors);
  spec.material_embedding = table(kMaterials);
  return spec;
}

std::vector<double> RenderSpec::embed(const Cell& cell) const {
  std::vector<double> out(input_dim, 0.0);
  if (!cell.occupied) return out;
  auto s = shape_embedding.row(static_cast<size_t>(cell.shape));
  auto c = color_embedding.row(static_cast<size_t>(cell.color));
  auto m = material_embedding.row(static_cast<size_t>(cell.material));
  for (size_t i = 0; i < input_dim; ++i) out[i] = s[i] + c[i] + m[i];
  return out;
}

Tensor render_features(std::span<const Cell> cells, const RenderSpec& spec,
                       uint64_t noise_seed) {
  Tensor out({cells.size(), spec.input_dim});
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> nd(
      0.0, spec.noise / std::sqrt(static_cast<double>(spec.input_dim)));
  for (size_t i = 0; i < cells.size(); ++i) {
    const auto base = spec.embed(cells[i]);
    for (size_t c = 0; c < spec.input_dim; ++c) {
      out.at(i, c) = base[c] + (spec.noise > 0.0 ? nd(rng) : 0.0);
    }
  }
  return out;
}

std::pair<int, int> draw_view_offset(uint64_t seed, size_t height, size_t width,
                                     size_t max_shift) {
  auto steps = [max_shift](size_t n) {
    std::vector<int> out;
    const long s = static_cast<long>(std::min(max_shift, n));
    for (long a = -s; a <= s; ++a) {
      const int v = static_cast<int>(((a % static_cast<long>(n)) + static_cast<long>(n)) % static_cast<long>(n));
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
    std::sort(out.begin(), out.end());
    return out;
  };
  std::vector<std::pair<int, int>> options;
  for (int dy : steps(height)) {
    for (int dx : steps(width)) {
      if (dy != 0 || dx != 0) options.emplace_back(dy, dx);
    }
  }
  if (options.empty()) return {0, 0};
  std::mt19937_64 rng(seed);
  return options[pick(rng, options.size())];
}

ScenePair reframe(const ScenePair& pair, int dy, int dx, uint64_t seed) {
  if (dy < 0 || dx < 0 || static_cast<size_t>(dy) >= pair.height ||
      static_cast<size_t>(dx) >= pair.width) {
    throw std::invalid_argument("reframe: offset outside the grid");
  }
  const auto unshifted = pair.after_in_before_frame();
  std::optional<size_t> changed;
  if (pair.changed_after) changed = pair.unshift(*pair.changed_after);
  ScenePair p = pair;
  p.view_dy = dy;
  p.view_dx = dx;
  p.seed = seed;
  for (size_t i = 0; i < p.cells(); ++i) p.after[p.shift(i)] = unshifted[i];
  if (changed) p.changed_after = p.shift(*changed);
  return p;
}

uint64_t view_seed(const ScenePair& pair, bool after) {
  return derive_seed(pair.seed, after ? 2 : 1);
}

// ---------------------------------------------------------------------------
// JSON Lines

namespace {

json cells_to_json(const std::vector<Cell>& cells) {
  json arr = json::array();
  for (const Cell& c : cells) {
    if (!c.occupied) {
      arr.push_back(nullptr);
    } else {
      arr.push_back({{"shape", name(c.shape)},
                     {"color", name(c.color)},
                     {"material", name(c.material)}});
    }
  }
  return arr;
}

std::vector<Cell> cells_from_json(const json& arr, size_t expected) {
  if (!arr.is_array() || arr.size() != expected) {
    throw std::invalid_argument("expected " + std::to_string(expected) + " cells");
  }
  std::vector<Cell> out;
  for (const json& j : arr) {
    Cell c;
    if (!j.is_null()) {
      c.occupied = true;
      c.shape = static_cast<Shape>(
          lookup(kShapeNames, j.at("shape").get<std::string>(), "shape"));
      c.color = static_cast<Color>(
          lookup(kColorNames, j.at("color").get<std::string>(), "color"));
      c.material = static_cast<Material>(lookup(
          kMaterialNames, j.at("material").get<std::string>(), "material"));
    }
    out.push_back(c);
  }
  return out;
}

json optional_index(const std::optional<size_t>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<size_t> optional_index(const json& j, size_t cells) {
  if (j.is_null()) return std::nullopt;
  const auto v = j.get<size_t>();
  if (v >= cells) throw std::invalid_argument("cell index out of range");
  return v;
}

}  // namespace

std::string to_json_line(const ScenePair& p) {
  json j;
  j["id"] = p.id;
  j["grid"] = {p.height, p.width};
  j["change_type"] = name(p.change);
  j["before_cells"] = cells_to_json(p.before);
  j["after_cells"] = cells_to_json(p.after);
  j["changed_before"] = optional_index(p.changed_before);
  j["changed_after"] = optional_index(p.changed_after);
  j["view_offset"] = {p.view_dy, p.view_dx};
  j["caption"] = p.caption;
  j["seed"] = p.seed;
  return j.dump();
}

ScenePair from_json_line(std::string_view line, size_t line_number) {
  try {
    const json j = json::parse(line);
    ScenePair p;
    p.id = j.at("id").get<uint64_t>();
    const auto& grid = j.at("grid");
    if (!grid.is_array() || grid.size() != 2) throw std::invalid_argument("grid must be [H,W]");
    p.height = grid[0].get<size_t>();
    p.width = grid[1].get<size_t>();
    if (p.height == 0 || p.width == 0) throw std::invalid_argument("empty grid");
    p.change = parse_change_type(j.at("change_type").get<std::string>());
    p.before = cells_from_json(j.at("before_cells"), p.cells());
    p.after = cells_from_json(j.at("after_cells"), p.cells());
    p.changed_before = optional_index(j.at("changed_before"), p.cells());
    p.changed_after = optional_index(j.at("changed_after"), p.cells());
    const auto& off = j.at("view_offset");
    if (!off.is_array() || off.size() != 2) {
      throw std::invalid_argument("view_offset must be [dy,dx]");
    }
    p.view_dy = off[0].get<int>();
    p.view_dx = off[1].get<int>();
    if (p.view_dy < 0 || p.view_dx < 0 || static_cast<size_t>(p.view_dy) >= p.height ||
        static_cast<size_t>(p.view_dx) >= p.width) {
      throw std::invalid_argument("view_offset outside the grid");
    }
    p.caption = j.at("caption").get<std::vector<std::string>>();
    p.seed = j.at("seed").get<uint64_t>();
    return p;
  } catch (const std::exception& e) {
    throw std::runtime_error("dataset line " + std::to_string(line_number) +
                             ": " + e.what());
  }
}

std::filesystem::path vocabulary_path(const std::filesystem::path& dataset) {
  std::filesystem::path v = dataset;
  v.replace_extension(".vocab");
  return v;
}

void write_dataset(std::span<const ScenePair> pairs,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  for (const ScenePair& p : pairs) out << to_json_line(p) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
  grammar_vocabulary().save(vocabulary_path(path));
}

std::vector<ScenePair> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  std::vector<ScenePair> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(from_json_line(line, lineno));
  }
  return out;
}

}  // namespace scorer::changeworld
