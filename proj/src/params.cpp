#include "scorer/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace scorer {

void ParamStore::add(std::string name, Tensor value) {
  if (tensors_.contains(name)) {
    throw std::invalid_argument("duplicate parameter '" + name + "'");
  }
  order_.push_back(name);
  tensors_.emplace(std::move(name), std::move(value));
}

bool ParamStore::contains(const std::string& name) const {
  return tensors_.contains(name);
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw std::out_of_range("unknown parameter '" + name + "'");
  }
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) {
    throw std::out_of_range("unknown parameter '" + name + "'");
  }
  return it->second;
}

size_t ParamStore::scalar_count() const {
  size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (order_ != other.order_) return false;
  for (const auto& name : order_) {
    const Tensor& a = get(name);
    const Tensor& b = other.get(name);
    if (a.dims() != b.dims()) return false;
    // Bitwise comparison so that -0.0 != 0.0 and NaN payloads count.
    if (std::memcmp(a.storage().data(), b.storage().data(),
                    a.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

BoundParams::BoundParams(ad::Tape& tape, const ParamStore& store, bool trainable)
    : tape_(&tape) {
  for (const auto& name : store.names()) {
    const Tensor& t = store.get(name);
    vars_.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
  }
}

BoundParams::BoundParams(ad::Tape& tape, const std::vector<std::string>& names,
                         const std::vector<ad::Var>& vars)
    : tape_(&tape) {
  if (names.size() != vars.size()) {
    throw std::invalid_argument("BoundParams: name and var counts differ");
  }
  for (size_t i = 0; i < names.size(); ++i) vars_.emplace(names[i], vars[i]);
}

ad::Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) {
    throw std::out_of_range("parameter '" + name + "' is not bound");
  }
  return it->second;
}

ParamStore BoundParams::gradients(const ParamStore& store) const {
  ParamStore out;
  for (const auto& name : store.names()) out.add(name, tape_->grad((*this)[name]));
  return out;
}

namespace {

void attention_specs(std::vector<ParamSpec>& out, const std::string& prefix,
                     size_t d) {
  for (const char* p : {"q", "k", "v", "o"}) {
    out.push_back({prefix + ".w" + p, {d, d}, InitKind::kWeight});
    out.push_back({prefix + ".b" + p, {d}, InitKind::kBias});
  }
}

void norm_specs(std::vector<ParamSpec>& out, const std::string& prefix, size_t d) {
  out.push_back({prefix + ".gamma", {d}, InitKind::kGain});
  out.push_back({prefix + ".beta", {d}, InitKind::kBias});
}

}  // namespace

std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
  cfg.validate();
  const size_t d = cfg.model_dim;
  std::vector<ParamSpec> s;
  // Encoder: projection, position table, reconstruction blocks, fusion head.
  s.push_back({"enc.proj.w", {cfg.input_dim, d}, InitKind::kWeight});
  s.push_back({"enc.proj.b", {d}, InitKind::kBias});
  s.push_back({"enc.pos", {cfg.tokens(), d}, InitKind::kTable});
  for (size_t l = 0; l < cfg.encoder_layers; ++l) {
    const std::string p = "enc.rr" + std::to_string(l);
    attention_specs(s, p + ".attn", d);
    norm_specs(s, p + ".ln", d);
  }
  s.push_back({"enc.fuse.w", {2 * d, d}, InitKind::kWeight});
  s.push_back({"enc.fuse.b", {d}, InitKind::kBias});
  s.push_back({"mtm.wq", {d, d}, InitKind::kWeight});
  s.push_back({"mtm.wk", {d, d}, InitKind::kWeight});
  // Decoder.
  s.push_back({"dec.embed", {cfg.vocab_size, cfg.embed_dim}, InitKind::kTable});
  s.push_back({"dec.embed_proj", {cfg.embed_dim, d}, InitKind::kWeight});
  s.push_back({"dec.pos", {cfg.decoder_steps(), d}, InitKind::kTable});
  for (size_t l = 0; l < cfg.decoder_layers; ++l) {
    const std::string p = "dec.l" + std::to_string(l);
    attention_specs(s, p + ".self", d);
    norm_specs(s, p + ".ln1", d);
    attention_specs(s, p + ".cross", d);
    norm_specs(s, p + ".ln2", d);
    s.push_back({p + ".ffn.w1", {d, 4 * d}, InitKind::kWeight});
    s.push_back({p + ".ffn.b1", {4 * d}, InitKind::kBias});
    s.push_back({p + ".ffn.w2", {4 * d, d}, InitKind::kWeight});
    s.push_back({p + ".ffn.b2", {d}, InitKind::kBias});
    norm_specs(s, p + ".ln3", d);
  }
  s.push_back({"dec.out.w", {d, cfg.vocab_size}, InitKind::kWeight});
  s.push_back({"dec.out.b", {cfg.vocab_size}, InitKind::kBias});
  // Backward reasoning.
  s.push_back({"cbr.fuse.w", {2 * d, d}, InitKind::kWeight});
  s.push_back({"cbr.fuse.b", {d}, InitKind::kBias});
  attention_specs(s, "cbr.attn", d);
  s.push_back({"cbr.out.w", {d, d}, InitKind::kWeight});
  s.push_back({"cbr.out.b", {d}, InitKind::kBias});
  s.push_back({"cbr.mtm.wq", {d, d}, InitKind::kWeight});
  s.push_back({"cbr.mtm.wk", {d, d}, InitKind::kWeight});
  return s;
}

ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore store;
  for (const ParamSpec& spec : param_specs(cfg)) {
    Tensor t(spec.dims);
    switch (spec.init) {
      case InitKind::kWeight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.dims[0]));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& v : t.values()) v = u(rng);
        break;
      }
      case InitKind::kTable: {
        std::normal_distribution<double> nd(0.0, 0.02);
        for (double& v : t.values()) v = nd(rng);
        break;
      }
      case InitKind::kGain:
        for (double& v : t.values()) v = 1.0;
        break;
      case InitKind::kBias:
        break;
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: magic, then per tensor u32 name length, name bytes, u32 rank,
// u32 dims, little-endian float64 values.

namespace {

void put_u32(std::ostream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& out, double d) {
  const auto bits = std::bit_cast<uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

bool get_bytes(std::istream& in, void* dst, size_t n) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  return static_cast<size_t>(in.gcount()) == n;
}

uint32_t get_u32(std::istream& in, const std::string& context) {
  unsigned char b[4];
  if (!get_bytes(in, b, 4)) throw CheckpointError("truncated checkpoint in " + context);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic.data(),
            static_cast<std::streamsize>(kCheckpointMagic.size()));
  for (const auto& name : params.names()) {
    const Tensor& t = params.get(name);
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (size_t d : t.dims()) put_u32(out, static_cast<uint32_t>(d));
    for (double v : t.values()) put_f64(out, v);
  }
  if (!out) throw CheckpointError("write failed for " + path.string());
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::string magic(kCheckpointMagic.size(), '\0');
  if (!get_bytes(in, magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw CheckpointError("bad checkpoint magic in " + path.string());
  }
  ParamStore store;
  while (in.peek() != std::char_traits<char>::eof()) {
    const uint32_t len = get_u32(in, "name length");
    if (len == 0 || len > 4096) throw CheckpointError("corrupt parameter name length");
    std::string name(len, '\0');
    if (!get_bytes(in, name.data(), len)) {
      throw CheckpointError("truncated checkpoint in parameter name");
    }
    const uint32_t rank = get_u32(in, name);
    if (rank < 1 || rank > 2) {
      throw CheckpointError("parameter '" + name + "' has unsupported rank " +
                            std::to_string(rank));
    }
    std::vector<size_t> dims(rank);
    for (auto& d : dims) d = get_u32(in, name);
    Tensor t;
    try {
      t = Tensor(dims);
    } catch (const ShapeError& e) {
      throw CheckpointError("parameter '" + name + "': " + e.what());
    }
    for (double& v : t.values()) {
      unsigned char b[8];
      if (!get_bytes(in, b, 8)) {
        throw CheckpointError("truncated checkpoint in parameter '" + name + "'");
      }
      uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
    store.add(std::move(name), std::move(t));
  }
  return store;
}

void check_compatible(const ParamStore& params, const ModelConfig& cfg) {
  for (const ParamSpec& spec : param_specs(cfg)) {
    if (!params.contains(spec.name)) {
      throw CheckpointError("checkpoint is missing parameter '" + spec.name + "'");
    }
    const Tensor& t = params.get(spec.name);
    if (t.dims() != spec.dims) {
      throw CheckpointError("parameter '" + spec.name + "' has dims " +
                            shape_string(t.dims()) + " but config expects " +
                            shape_string(spec.dims));
    }
  }
  if (params.size() != param_specs(cfg).size()) {
    throw CheckpointError("checkpoint has parameters the config does not define");
  }
}

}  // namespace scorer
