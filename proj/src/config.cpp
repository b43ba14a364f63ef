#include "scorer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>

namespace scorer {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

size_t to_size(std::string_view key, std::string_view v) {
  size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("config key '" + std::string(key) +
                      "' expects a non-negative integer, got '" +
                      std::string(v) + "'");
  }
  return out;
}

double to_double(std::string_view key, std::string_view v) {
  try {
    size_t used = 0;
    const std::string s(v);
    const double d = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + std::string(key) +
                      "' expects a number, got '" + std::string(v) + "'");
  }
}

bool to_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + std::string(key) + "' expects true or false, got '" +
                    std::string(v) + "'");
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

Variant parse_variant(std::string_view s) {
  if (s == "subtraction") return Variant::kSubtraction;
  if (s == "rr") return Variant::kRr;
  if (s == "scorer") return Variant::kScorer;
  if (s == "rr+cbr") return Variant::kRrCbr;
  if (s == "scorer+cbr") return Variant::kScorerCbr;
  throw ConfigError("unknown variant '" + std::string(s) + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kSubtraction: return "subtraction";
    case Variant::kRr: return "rr";
    case Variant::kScorer: return "scorer";
    case Variant::kRrCbr: return "rr+cbr";
    case Variant::kScorerCbr: return "scorer+cbr";
  }
  return "?";
}

bool uses_reconstruction(Variant v) { return v != Variant::kSubtraction; }
bool uses_view_alignment(Variant v) {
  return v == Variant::kScorer || v == Variant::kScorerCbr;
}
bool uses_cbr(Variant v) { return v == Variant::kRrCbr || v == Variant::kScorerCbr; }

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(grid_h >= 1 && grid_w >= 1, "grid dims must be positive");
  need(input_dim >= 1 && model_dim >= 1 && embed_dim >= 1,
       "widths must be positive");
  need(encoder_layers >= 1, "encoder_layers must be >= 1");
  need(decoder_layers >= 1, "decoder_layers must be >= 1");
  for (auto [name, h] : {std::pair<const char*, size_t>{"encoder_heads", encoder_heads},
                         {"mtm_heads", mtm_heads},
                         {"decoder_heads", decoder_heads},
                         {"cbr_heads", cbr_heads},
                         {"cbr_mtm_heads", cbr_mtm_heads}}) {
    need(h >= 1 && model_dim % h == 0,
         std::string(name) + "=" + std::to_string(h) +
             " must divide model_dim=" + std::to_string(model_dim));
  }
  need(vocab_size > 4, "vocab_size must exceed the reserved ids");
  need(max_caption_len >= 2, "max_caption_len must be >= 2");
}

TrainConfig TrainConfig::effective() const {
  TrainConfig out = *this;
  if (!uses_cbr(variant)) out.lambda_m = 0.0;
  if (!uses_view_alignment(variant)) out.lambda_v = 0.0;
  return out;
}

void TrainConfig::validate() const {
  model.validate();
  if (lambda_v < 0.0 || lambda_m < 0.0) throw ConfigError("lambdas must be >= 0");
  if (!(alignment.temperature > 0.0)) throw ConfigError("tau must be > 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(render_noise >= 0.0)) throw ConfigError("render_noise must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const TrainConfig eff = effective();
  if ((eff.lambda_v > 0.0 || eff.lambda_m > 0.0) && batch_size < 2) {
    throw ConfigError("batch_size must be >= 2 when a contrastive loss is active");
  }
}

void TrainConfig::set(std::string_view key, std::string_view value) {
  using Setter = std::function<void(TrainConfig&, std::string_view)>;
  auto sz = [](size_t ModelConfig::*field, std::string_view k) {
    return [field, k](TrainConfig& c, std::string_view v) {
      c.model.*field = to_size(k, v);
    };
  };
  static const std::map<std::string, Setter, std::less<>> setters = {
      {"grid_h", sz(&ModelConfig::grid_h, "grid_h")},
      {"grid_w", sz(&ModelConfig::grid_w, "grid_w")},
      {"input_dim", sz(&ModelConfig::input_dim, "input_dim")},
      {"model_dim", sz(&ModelConfig::model_dim, "model_dim")},
      {"embed_dim", sz(&ModelConfig::embed_dim, "embed_dim")},
      {"encoder_layers", sz(&ModelConfig::encoder_layers, "encoder_layers")},
      {"encoder_heads", sz(&ModelConfig::encoder_heads, "encoder_heads")},
      {"mtm_heads", sz(&ModelConfig::mtm_heads, "mtm_heads")},
      {"decoder_layers", sz(&ModelConfig::decoder_layers, "decoder_layers")},
      {"decoder_heads", sz(&ModelConfig::decoder_heads, "decoder_heads")},
      {"cbr_heads", sz(&ModelConfig::cbr_heads, "cbr_heads")},
      {"cbr_mtm_heads", sz(&ModelConfig::cbr_mtm_heads, "cbr_mtm_heads")},
      {"vocab_size", sz(&ModelConfig::vocab_size, "vocab_size")},
      {"max_caption_len", sz(&ModelConfig::max_caption_len, "max_caption_len")},
      {"variant", [](TrainConfig& c, std::string_view v) { c.variant = parse_variant(v); }},
      {"lambda_v", [](TrainConfig& c, std::string_view v) { c.lambda_v = to_double("lambda_v", v); }},
      {"lambda_m", [](TrainConfig& c, std::string_view v) { c.lambda_m = to_double("lambda_m", v); }},
      {"tau", [](TrainConfig& c, std::string_view v) { c.alignment.temperature = to_double("tau", v); }},
      {"sim_mode", [](TrainConfig& c, std::string_view v) {
         try {
           c.alignment.sim_mode = similarity::parse_sim_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"loss_mode", [](TrainConfig& c, std::string_view v) {
         try {
           c.alignment.loss_mode = similarity::parse_loss_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"lr", [](TrainConfig& c, std::string_view v) { c.lr = to_double("lr", v); }},
      {"beta1", [](TrainConfig& c, std::string_view v) { c.beta1 = to_double("beta1", v); }},
      {"beta2", [](TrainConfig& c, std::string_view v) { c.beta2 = to_double("beta2", v); }},
      {"adam_eps", [](TrainConfig& c, std::string_view v) { c.adam_eps = to_double("adam_eps", v); }},
      {"batch_size", [](TrainConfig& c, std::string_view v) { c.batch_size = to_size("batch_size", v); }},
      {"iterations", [](TrainConfig& c, std::string_view v) { c.iterations = to_size("iterations", v); }},
      {"seed", [](TrainConfig& c, std::string_view v) { c.seed = to_size("seed", v); }},
      {"checkpoint_interval", [](TrainConfig& c, std::string_view v) {
         c.checkpoint_interval = to_size("checkpoint_interval", v);
       }},
      {"render_seed", [](TrainConfig& c, std::string_view v) { c.render_seed = to_size("render_seed", v); }},
      {"render_noise", [](TrainConfig& c, std::string_view v) { c.render_noise = to_double("render_noise", v); }},
      {"augment_views", [](TrainConfig& c, std::string_view v) { c.augment_views = to_bool("augment_views", v); }},
      {"view_shift", [](TrainConfig& c, std::string_view v) { c.view_shift = to_size("view_shift", v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) {
    throw ConfigError("unknown config key '" + std::string(key) + "'");
  }
  it->second(*this, trim(value));
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  const ModelConfig& m = model;
  return {
      {"grid_h", std::to_string(m.grid_h)},
      {"grid_w", std::to_string(m.grid_w)},
      {"input_dim", std::to_string(m.input_dim)},
      {"model_dim", std::to_string(m.model_dim)},
      {"embed_dim", std::to_string(m.embed_dim)},
      {"encoder_layers", std::to_string(m.encoder_layers)},
      {"encoder_heads", std::to_string(m.encoder_heads)},
      {"mtm_heads", std::to_string(m.mtm_heads)},
      {"decoder_layers", std::to_string(m.decoder_layers)},
      {"decoder_heads", std::to_string(m.decoder_heads)},
      {"cbr_heads", std::to_string(m.cbr_heads)},
      {"cbr_mtm_heads", std::to_string(m.cbr_mtm_heads)},
      {"vocab_size", std::to_string(m.vocab_size)},
      {"max_caption_len", std::to_string(m.max_caption_len)},
      {"variant", to_string(variant)},
      {"lambda_v", fmt_double(lambda_v)},
      {"lambda_m", fmt_double(lambda_m)},
      {"tau", fmt_double(alignment.temperature)},
      {"sim_mode", similarity::to_string(alignment.sim_mode)},
      {"loss_mode", similarity::to_string(alignment.loss_mode)},
      {"lr", fmt_double(lr)},
      {"beta1", fmt_double(beta1)},
      {"beta2", fmt_double(beta2)},
      {"adam_eps", fmt_double(adam_eps)},
      {"batch_size", std::to_string(batch_size)},
      {"iterations", std::to_string(iterations)},
      {"seed", std::to_string(seed)},
      {"checkpoint_interval", std::to_string(checkpoint_interval)},
      {"render_seed", std::to_string(render_seed)},
      {"render_noise", fmt_double(render_noise)},
      {"augment_views", augment_views ? "true" : "false"},
      {"view_shift", std::to_string(view_shift)},
  };
}

TrainConfig preset(std::string_view name) {
  TrainConfig c;
  if (name == "desk") return c;
  if (name == "clevr-change") {
    c.model.grid_h = 14;
    c.model.grid_w = 14;
    c.model.input_dim = 1024;
    c.model.model_dim = 512;
    c.model.embed_dim = 300;
    c.model.decoder_layers = 2;
    c.model.decoder_heads = 8;
    c.model.encoder_heads = 8;
    c.model.mtm_heads = 8;
    c.model.cbr_heads = 8;
    c.model.cbr_mtm_heads = 8;
    c.model.encoder_layers = 2;
    c.batch_size = 128;
    c.lr = 2e-4;
    c.iterations = 10000;
    return c;
  }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

TrainConfig parse_config(std::istream& in, TrainConfig base) {
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view sv = line;
    if (auto hash = sv.find('#'); hash != std::string_view::npos) {
      sv = sv.substr(0, hash);
    }
    sv = trim(sv);
    if (sv.empty()) continue;
    const auto eq = sv.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value");
    }
    try {
      base.set(trim(sv.substr(0, eq)), trim(sv.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, std::move(base));
}

std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : cfg.to_map()) out += k + "=" + v + "\n";
  return out;
}

}  // namespace scorer
