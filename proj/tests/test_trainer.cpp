#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "scorer/changeworld.hpp"
#include "scorer/similarity.hpp"
#include "scorer/trainer.hpp"

using namespace scorer;

namespace {

TrainConfig small_cfg(Variant v = Variant::kScorerCbr) {
  TrainConfig c = preset("desk");
  c.variant = v;
  c.batch_size = 4;
  c.iterations = 5;
  return c;
}

const model::RenderedDataset& small_data() {
  static const model::RenderedDataset d = model::RenderedDataset::build(
      changeworld::generate_dataset(24, 5, {}), changeworld::grammar_vocabulary(), small_cfg());
  return d;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("scorer_test_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("total_loss") {
  CHECK(model::total_loss(1.0, 2.0, 3.0, 0.5, 0.25) == 2.75);
  CHECK(model::total_loss(1.25, 7.0, 9.0, 0.0, 0.0) == 1.25);
  CHECK(model::total_loss(2.0, 3.0, 5.0, 0.1, 0.001) == 2.0 + 0.1 * 3.0 + 0.001 * 5.0);
  // Inactive terms are dropped even when non-finite.
  CHECK(model::total_loss(1.0, NAN, INFINITY, 0.0, 0.0) == 1.0);
  ad::Tape t;
  auto cap = t.constant(Tensor::scalar(1.0));
  CHECK(model::total_loss(cap, t.constant(Tensor::scalar(2.0)), t.constant(Tensor::scalar(3.0)), 0.5, 0.25)
            .value()
            .item() == 2.75);
  CHECK(model::total_loss(cap, ad::Var{}, ad::Var{}, 0.0, 0.0).value().item() == 1.0);
}

TEST_CASE("config") {
  TrainConfig c;
  std::istringstream in("# comment\nlambda_v = 0.5\nvariant=rr\n\nbatch_size=8 # trailing\n");
  c = parse_config(in, c);
  CHECK(c.lambda_v == 0.5);
  CHECK(c.variant == Variant::kRr);
  CHECK(c.batch_size == 8);
  std::istringstream bad("lambda_x = 1\n");
  CHECK_THROWS_AS(parse_config(bad), ConfigError);
  std::istringstream nokv("lambda_v\n");
  CHECK_THROWS_AS(parse_config(nokv), ConfigError);
  CHECK_THROWS_AS(c.set("lr", "abc"), ConfigError);
  CHECK_THROWS_AS(c.set("lr", "1e-3x"), ConfigError);
  CHECK_THROWS_AS(preset("nope"), ConfigError);
  c.set("augment_views", "false");
  CHECK_FALSE(c.augment_views);
  CHECK(c.to_map().at("augment_views") == "false");
  CHECK_THROWS_AS(c.set("augment_views", "maybe"), ConfigError);

  std::istringstream round(format_config(preset("clevr-change")));
  CHECK(parse_config(round).to_map() == preset("clevr-change").to_map());

  SUBCASE("variant gating") {
    TrainConfig g;
    g.lambda_v = 0.3;
    g.lambda_m = 0.2;
    g.variant = Variant::kRr;
    CHECK(g.effective().lambda_v == 0.0);
    CHECK(g.effective().lambda_m == 0.0);
    g.variant = Variant::kRrCbr;
    CHECK(g.effective().lambda_v == 0.0);
    CHECK(g.effective().lambda_m == 0.2);
    g.variant = Variant::kScorer;
    CHECK(g.effective().lambda_v == 0.3);
    CHECK(g.effective().lambda_m == 0.0);
    g.variant = Variant::kScorerCbr;
    CHECK(g.effective().lambda_v == 0.3);
    CHECK(g.effective().lambda_m == 0.2);
  }
  SUBCASE("validation") {
    TrainConfig v;
    v.batch_size = 1;
    CHECK_THROWS_AS(v.validate(), ConfigError);
    v.variant = Variant::kSubtraction;
    CHECK_NOTHROW(v.validate());
    TrainConfig h;
    h.model.mtm_heads = 5;
    CHECK_THROWS(h.validate());
    TrainConfig n;
    n.lambda_v = -1.0;
    CHECK_THROWS_AS(n.validate(), ConfigError);
  }
}

TEST_CASE("init_params") {
  const ModelConfig m = preset("desk").model;
  const ParamStore p = init_params(m, 3);
  CHECK(p == init_params(m, 3));
  CHECK_FALSE(p == init_params(m, 4));
  for (const auto& spec : param_specs(m)) {
    CAPTURE(spec.name);
    const Tensor& t = p.get(spec.name);
    CHECK(t.dims() == spec.dims);
    switch (spec.init) {
      case InitKind::kWeight: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.dims[0]));
        for (double v : t.values()) CHECK(std::abs(v) <= bound);
        break;
      }
      case InitKind::kBias:
        for (double v : t.values()) CHECK(v == 0.0);
        break;
      case InitKind::kGain:
        for (double v : t.values()) CHECK(v == 1.0);
        break;
      case InitKind::kTable: {
        double ss = 0.0;
        for (double v : t.values()) ss += v * v;
        const double sd = std::sqrt(ss / static_cast<double>(t.size()));
        CHECK(sd > 0.015);
        CHECK(sd < 0.025);
        break;
      }
    }
  }
  // Parameter set is variant independent and covers all four groups.
  std::set<std::string> groups;
  for (const auto& n : p.names()) groups.insert(n.substr(0, n.find('.')));
  CHECK(groups == std::set<std::string>{"cbr", "dec", "enc", "mtm"});
}

TEST_CASE("checkpoint") {
  const ModelConfig m = preset("desk").model;
  const ParamStore p = init_params(m, 8);
  const auto path = temp_file("ckpt.bin");
  save_checkpoint(p, path);
  SUBCASE("round trip is bit exact") {
    const ParamStore q = load_checkpoint(path);
    CHECK(q == p);
    CHECK(q.names() == p.names());
    std::string bytes = slurp(path);
    CHECK(bytes.rfind(std::string(kCheckpointMagic), 0) == 0);
  }
  SUBCASE("bad magic") {
    std::string bytes = slurp(path);
    bytes[0] = 'X';
    std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes;
    CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  }
  SUBCASE("truncation") {
    std::string bytes = slurp(path);
    for (size_t cut : {bytes.size() - 3, bytes.size() / 2, size_t{20}}) {
      std::ofstream(path, std::ios::binary | std::ios::trunc) << bytes.substr(0, cut);
      CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
    }
  }
  SUBCASE("mismatched config names the first offending parameter") {
    ModelConfig other = m;
    other.embed_dim = 32;
    std::string expected;
    for (const auto& spec : param_specs(other)) {
      if (!p.contains(spec.name) || p.get(spec.name).dims() != spec.dims) {
        expected = spec.name;
        break;
      }
    }
    REQUIRE_FALSE(expected.empty());
    try {
      check_compatible(load_checkpoint(path), other);
      FAIL("expected a mismatch");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("'" + expected + "'") != std::string::npos);
    }
    ModelConfig deeper = m;
    deeper.decoder_layers = 2;
    CHECK_THROWS_WITH_AS(check_compatible(p, deeper), doctest::Contains("dec.l1"), CheckpointError);
    CHECK_NOTHROW(check_compatible(p, m));
  }
  CHECK_THROWS_AS(load_checkpoint(temp_file("missing.bin")), CheckpointError);
  std::filesystem::remove(path);
}

TEST_CASE("BatchSampler") {
  trainer::BatchSampler a(10, 4, 1), b(10, 4, 1);
  for (int k = 0; k < 20; ++k) {
    const auto x = a.next();
    CHECK(x == b.next());
    CHECK(x.size() == 4);
    CHECK(std::set<size_t>(x.begin(), x.end()).size() == 4);
    for (size_t i : x) CHECK(i < 10);
  }
  // Two batches from one permutation never overlap.
  trainer::BatchSampler c(8, 4, 2);
  const auto first = c.next(), second = c.next();
  std::set<size_t> all(first.begin(), first.end());
  all.insert(second.begin(), second.end());
  CHECK(all.size() == 8);
}

TEST_CASE("variant gating never evaluates similarity without alignment") {
  const auto& data = small_data();
  const std::vector<size_t> idx = {0, 1, 2, 3};
  const auto batch = model::make_batch(data, idx);
  const ParamStore store = init_params(small_cfg().model, 1);
  for (Variant v : {Variant::kSubtraction, Variant::kRr}) {
    const uint64_t before = similarity::evaluation_count();
    ad::Tape t;
    BoundParams p(t, store, true);
    auto r = model::forward(batch, p, small_cfg(v));
    t.backward(r.total);
    CHECK(similarity::evaluation_count() == before);
    CHECK_FALSE(r.cv);
    CHECK_FALSE(r.cm);
    CHECK(r.total.value().item() == r.cap.value().item());
  }
  for (Variant v : {Variant::kScorer, Variant::kRrCbr, Variant::kScorerCbr}) {
    const uint64_t before = similarity::evaluation_count();
    ad::Tape t;
    BoundParams p(t, store, true);
    auto r = model::forward(batch, p, small_cfg(v));
    CHECK(similarity::evaluation_count() > before);
    CHECK(static_cast<bool>(r.cv) == uses_view_alignment(v));
    CHECK(static_cast<bool>(r.cm) == uses_cbr(v));
  }
}

TEST_CASE("gradient completeness for scorer+cbr") {
  const auto& data = small_data();
  const std::vector<size_t> idx = {0, 1, 2, 3};
  const auto batch = model::make_batch(data, idx);
  const TrainConfig cfg = small_cfg();
  const ParamStore store = init_params(cfg.model, 1);
  ad::Tape t;
  BoundParams p(t, store, true);
  t.backward(model::forward(batch, p, cfg).total);
  const ParamStore g = p.gradients(store);
  std::map<std::string, double> group;
  for (const auto& n : g.names()) {
    double s = 0.0;
    for (double v : g.get(n).values()) s += std::abs(v);
    group[n.substr(0, n.find('.'))] += s;
    // Key biases shift every score of a query equally and cancel in softmax.
    CAPTURE(n);
    if (n.find(".bk") == std::string::npos) CHECK(s > 0.0);
  }
  for (const char* name : {"enc", "mtm", "dec", "cbr"}) {
    CAPTURE(name);
    CHECK(group[name] > 0.0);
  }
}

TEST_CASE("train") {
  const auto& data = small_data();
  const auto ckpt = temp_file("train.ckpt");
  const auto csv = temp_file("train.csv");

  SUBCASE("zero iterations writes the initialization") {
    TrainConfig cfg = small_cfg();
    cfg.iterations = 0;
    trainer::TrainOptions opt;
    opt.checkpoint = ckpt;
    const auto r = trainer::train(data, cfg, opt);
    const ParamStore init = init_params(cfg.model, changeworld::derive_seed(cfg.seed, 1));
    CHECK(r.params == init);
    CHECK(load_checkpoint(ckpt) == init);
    CHECK(r.history.empty());
  }
  SUBCASE("fixed seed is bit reproducible; CSV logs every iteration") {
    TrainConfig cfg = small_cfg();
    cfg.iterations = 50;
    trainer::TrainOptions opt;
    opt.checkpoint = ckpt;
    opt.metrics_csv = csv;
    trainer::train(data, cfg, opt);
    const std::string first = slurp(ckpt);
    const std::string log = slurp(csv);
    trainer::train(data, cfg, opt);
    CHECK(slurp(ckpt) == first);
    CHECK(slurp(csv) == log);
    CHECK(log.rfind("iter,L_total,L_cap,L_cv,L_cm\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 51);
    cfg.seed = 2;
    trainer::train(data, cfg, opt);
    CHECK(slurp(ckpt) != first);
  }
  SUBCASE("interval checkpoints") {
    TrainConfig cfg = small_cfg();
    cfg.iterations = 4;
    cfg.checkpoint_interval = 2;
    trainer::TrainOptions opt;
    opt.checkpoint = ckpt;
    trainer::train(data, cfg, opt);
    const auto mid = temp_file("train.iter2.ckpt");
    CHECK(std::filesystem::exists(mid));
    CHECK(std::filesystem::exists(ckpt));
    CHECK_FALSE(load_checkpoint(mid) == load_checkpoint(ckpt));
    std::filesystem::remove(mid);
  }
  SUBCASE("200 steps on one batch halve the loss") {
    TrainConfig cfg = small_cfg();
    cfg.iterations = 200;
    trainer::TrainOptions opt;
    opt.fixed_batch = std::vector<size_t>{0, 1, 2, 3};
    const auto r = trainer::train(data, cfg, opt);
    const double initial = trainer::evaluate_losses(model::make_batch(data, *opt.fixed_batch),
                                                    init_params(cfg.model, changeworld::derive_seed(cfg.seed, 1)),
                                                    cfg)
                               .total;
    CHECK(r.history.front().total == doctest::Approx(initial).epsilon(1e-12));
    CHECK(r.history.back().total < 0.5 * initial);
  }
  SUBCASE("divergence aborts") {
    TrainConfig cfg = small_cfg();
    cfg.lr = 1e300;
    cfg.iterations = 20;
    CHECK_THROWS_AS(trainer::train(data, cfg), trainer::DivergenceError);
  }
  SUBCASE("evaluate_losses matches the training record without side effects") {
    TrainConfig cfg = small_cfg();
    const auto batch = model::make_batch(data, std::vector<size_t>{4, 5, 6, 7});
    ParamStore params = init_params(cfg.model, 9);
    const ParamStore copy = params;
    const auto e = trainer::evaluate_losses(batch, params, cfg);
    CHECK(params == copy);
    AdamState adam(params, AdamHyper{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps});
    const auto s = trainer::train_step(batch, params, adam, cfg);
    CHECK(s.total == e.total);
    CHECK(s.cap == e.cap);
    CHECK(s.cv == e.cv);
    CHECK(s.cm == e.cm);
    CHECK(e.total == model::total_loss(e.cap, e.cv, e.cm, cfg.lambda_v, cfg.lambda_m));
    CHECK_FALSE(params == copy);
  }
  std::filesystem::remove(ckpt);
  std::filesystem::remove(csv);
}

TEST_CASE("dataset rendering contract") {
  TrainConfig cfg = small_cfg();
  auto pairs = changeworld::generate_dataset(3, 1, {});
  const auto d = model::RenderedDataset::build(pairs, changeworld::grammar_vocabulary(), cfg);
  CHECK(d.before[0].rows() == 16);
  CHECK(d.before[0].cols() == 32);
  CHECK(d.captions[0] == d.vocab.encode(pairs[0].caption));
  const auto b = model::make_batch(d, std::vector<size_t>{2, 0});
  CHECK(b.raw_before.rows() == 32);
  CHECK(b.raw_after.at(16, 3) == d.after[0].at(0, 3));
  SUBCASE("reframed batches re-render the same pairs from another viewpoint") {
    TrainConfig quiet = small_cfg();
    quiet.render_noise = 0.0;
    const auto dq = model::RenderedDataset::build(changeworld::generate_dataset(40, 2, {}),
                                                  changeworld::grammar_vocabulary(), quiet);
    std::vector<size_t> idx(dq.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto r = model::make_reframed_batch(dq, idx, 11, 4);
    CHECK(r.captions == dq.captions);
    CHECK(model::make_reframed_batch(dq, idx, 11, 4).raw_after == r.raw_after);
    size_t moved = 0;
    for (size_t k = 0; k < idx.size(); ++k) {
      // noise-free before views are untouched
      for (size_t i = 0; i < 16; ++i) {
        for (size_t c = 0; c < 32; ++c) CHECK(r.raw_before.at(k * 16 + i, c) == dq.before[k].at(i, c));
      }
      // the after view is some cyclic shift of the stored one
      const auto& p = dq.pairs[k];
      bool found = false;
      for (size_t dy = 0; dy < 4 && !found; ++dy) {
        for (size_t dx = 0; dx < 4 && !found; ++dx) {
          bool same = true;
          for (size_t i = 0; i < 16 && same; ++i) {
            const size_t src = p.shift(i);
            const size_t dst = ((i / 4 + dy) % 4) * 4 + (i % 4 + dx) % 4;
            for (size_t c = 0; c < 32; ++c) same = same && r.raw_after.at(k * 16 + dst, c) == dq.after[k].at(src, c);
          }
          if (same) {
            found = true;
            if (static_cast<int>(dy) != p.view_dy || static_cast<int>(dx) != p.view_dx) ++moved;
          }
        }
      }
      CHECK(found);
    }
    CHECK(moved > 20);
    // with noise, fresh draws differ from the stored render
    const auto noisy = model::make_reframed_batch(d, std::vector<size_t>{0}, 3, 1);
    CHECK_FALSE(noisy.raw_before == model::make_batch(d, std::vector<size_t>{0}).raw_before);
  }
  cfg.model.grid_h = 3;
  CHECK_THROWS(model::RenderedDataset::build(pairs, changeworld::grammar_vocabulary(), cfg));
  cfg = small_cfg();
  cfg.model.max_caption_len = 5;
  CHECK_THROWS(model::RenderedDataset::build(pairs, changeworld::grammar_vocabulary(), cfg));
}
