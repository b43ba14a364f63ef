// Acceptance run: one PASS/FAIL line per criterion, details indented below.
//
//   acceptance [--criteria 1,2,...] [--verbose]

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "scorer/changeworld.hpp"
#include "scorer/gradcheck.hpp"
#include "scorer/metrics.hpp"
#include "scorer/similarity.hpp"
#include "scorer/trainer.hpp"

using namespace scorer;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::vector<std::string> details;
  void note(const char* fmt, ...) __attribute__((format(printf, 2, 3)));
};

void Outcome::note(const char* fmt, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  details.emplace_back(buf);
}

bool g_verbose = false;

Tensor random_tensor(std::mt19937_64& rng, size_t r, size_t c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor t({r, c});
  for (double& v : t.values()) v = nd(rng);
  return t;
}

// Brute-force double loop over token pairs.
double tm_oracle(const Tensor& q, const Tensor& k) {
  auto dot = [&](size_t i, size_t j) {
    double s = 0.0;
    for (size_t c = 0; c < q.cols(); ++c) s += q.at(i, c) * k.at(j, c);
    return s;
  };
  double fwd = 0.0, bwd = 0.0;
  for (size_t i = 0; i < q.rows(); ++i) {
    double m = -INFINITY;
    for (size_t j = 0; j < k.rows(); ++j) m = std::max(m, dot(i, j));
    fwd += m;
  }
  for (size_t j = 0; j < k.rows(); ++j) {
    double m = -INFINITY;
    for (size_t i = 0; i < q.rows(); ++i) m = std::max(m, dot(i, j));
    bwd += m;
  }
  return 0.5 * (fwd / static_cast<double>(q.rows()) + bwd / static_cast<double>(k.rows()));
}

double info_nce_oracle(const Tensor& s, double tau) {
  const size_t b = s.rows();
  double rows = 0.0, cols = 0.0;
  for (size_t k = 0; k < b; ++k) {
    double zr = 0.0, zc = 0.0;
    for (size_t r = 0; r < b; ++r) {
      zr += std::exp(s.at(k, r) / tau);
      zc += std::exp(s.at(r, k) / tau);
    }
    rows -= std::log(std::exp(s.at(k, k) / tau) / zr);
    cols -= std::log(std::exp(s.at(k, k) / tau) / zc);
  }
  return 0.5 * (rows + cols) / static_cast<double>(b);
}

Outcome criterion_tm() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<size_t> nd(1, 6), dd(1, 8);
  double worst = 0.0;
  bool symmetric = true, invariant = true;
  for (int trial = 0; trial < 200; ++trial) {
    const size_t n1 = nd(rng), n2 = n1, d = dd(rng);
    const Tensor q = random_tensor(rng, n1, d), k = random_tensor(rng, n2, d);
    const double v = similarity::tm_similarity(q, k);
    worst = std::max(worst, std::abs(v - tm_oracle(q, k)));
    symmetric = symmetric && similarity::tm_similarity(k, q) == v;
    std::vector<size_t> perm(n1);
    std::iota(perm.begin(), perm.end(), size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor qp({n1, d});
    for (size_t i = 0; i < n1; ++i) {
      for (size_t c = 0; c < d; ++c) qp.at(i, c) = q.at(perm[i], c);
    }
    invariant = invariant && similarity::tm_similarity(qp, k) == v;
  }
  const double secs = seconds_since(t0);
  o.pass = worst <= 1e-10 && symmetric && invariant && secs < 5.0;
  o.note("max |TM - oracle| = %.3e over 200 instances (tolerance 1e-10)", worst);
  o.note("symmetry bit-exact: %s; token permutation invariance bit-exact: %s",
         symmetric ? "yes" : "no", invariant ? "yes" : "no");
  o.note("runtime %.3f s (limit 5 s)", secs);
  return o;
}

Outcome criterion_infonce() {
  Outcome o;
  bool ok = true;
  for (size_t b : {2u, 4u, 8u}) {
    const double l = similarity::info_nce_bidirectional(Tensor({b, b}, 0.3), 0.1);
    const double err = std::abs(l - std::log(static_cast<double>(b)));
    ok = ok && err <= 1e-12;
    o.note("constant %zux%zu: loss %.15f, |loss - ln %zu| = %.2e", b, b, l, b, err);
  }
  Tensor sharp({2, 2}, -20.0);
  sharp.at(0, 0) = sharp.at(1, 1) = 20.0;
  const double ls = similarity::info_nce_bidirectional(sharp, 1.0);
  ok = ok && ls < 1e-15;
  o.note("diag +20 / off -20, tau 1: loss %.3e (limit 1e-15)", ls);
  std::mt19937_64 rng(7);
  double worst = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Tensor s = random_tensor(rng, 3, 3);
    worst = std::max(worst, std::abs(similarity::info_nce_bidirectional(s, 0.5) - info_nce_oracle(s, 0.5)));
  }
  ok = ok && worst <= 1e-12;
  o.note("random 3x3 vs direct formula: max error %.3e over 50 draws (tolerance 1e-12)", worst);
  o.pass = ok;
  return o;
}

Outcome criterion_gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto cfg = gradcheck::tiny_config();
  o.note("tiny model: N=%zu, D=%zu, B=%zu, U=%zu; step 1e-4, tolerance 1e-4", cfg.model.tokens(),
         cfg.model.model_dim, cfg.batch_size, cfg.model.vocab_size);
  double worst = 0.0;
  std::string worst_name;
  size_t failed = 0;
  for (const auto& name : gradcheck::case_names()) {
    const auto r = gradcheck::check(gradcheck::make_case(name, 1));
    if (r.max_rel_error >= 1e-4) {
      ++failed;
      o.note("%s failed: %.3e", name.c_str(), r.max_rel_error);
    }
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
    if (g_verbose || name.rfind("L_", 0) == 0) o.note("%-24s %.3e", name.c_str(), r.max_rel_error);
  }
  const double secs = seconds_since(t0);
  o.pass = failed == 0 && secs < 60.0;
  o.note("%zu cases, worst %s at %.3e; runtime %.1f s (limit 60 s)", gradcheck::case_names().size(),
         worst_name.c_str(), worst, secs);
  return o;
}

// ---------------------------------------------------------------------------
// Training-based criteria share datasets and runs.

struct Run {
  trainer::TrainResult result;
  metrics::EvalReport report;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

class Lab {
 public:
  Lab() : cfg_(preset("desk")) {
    const auto vocab = changeworld::grammar_vocabulary();
    train_ = std::make_unique<model::RenderedDataset>(
        model::RenderedDataset::build(changeworld::generate_dataset(2000, 1, {}), vocab, cfg_));
    eval_ = std::make_unique<model::RenderedDataset>(
        model::RenderedDataset::build(changeworld::generate_dataset(200, 2, {}), vocab, cfg_));
  }

  const TrainConfig& cfg() const { return cfg_; }
  const model::RenderedDataset& train_set() const { return *train_; }
  const model::RenderedDataset& eval_set() const { return *eval_; }

  TrainConfig config_for(Variant v, uint64_t seed) const {
    TrainConfig c = cfg_;
    c.variant = v;
    c.seed = seed;
    return c;
  }

  const Run& run(Variant v, uint64_t seed) {
    const auto key = std::make_pair(static_cast<int>(v), seed);
    if (auto it = runs_.find(key); it != runs_.end()) return it->second;
    const TrainConfig c = config_for(v, seed);
    std::fprintf(stderr, "training %s seed %llu (%zu iterations)\n", to_string(v).c_str(),
                 static_cast<unsigned long long>(seed), c.iterations);
    trainer::TrainOptions opt;
    if (g_verbose) {
      opt.on_iteration = [](const trainer::LossRecord& r) {
        if (r.iter % 500 == 0) {
          std::fprintf(stderr, "  iter %zu: L %.4f (cap %.4f, cv %.4f, cm %.4f)\n", r.iter, r.total, r.cap,
                       r.cv, r.cm);
        }
      };
    }
    Run r;
    auto t0 = Clock::now();
    r.result = trainer::train(*train_, c, opt);
    r.train_seconds = seconds_since(t0);
    t0 = Clock::now();
    r.report = metrics::evaluate(r.result.params, *eval_, c);
    r.eval_seconds = seconds_since(t0);
    std::fprintf(stderr, "  exact match %.3f, BLEU-4 %.3f, %.0f s\n", r.report.all().exact_match,
                 r.report.all().bleu4, r.train_seconds + r.eval_seconds);
    return runs_.emplace(key, std::move(r)).first->second;
  }

 private:
  TrainConfig cfg_;
  std::unique_ptr<model::RenderedDataset> train_, eval_;
  std::map<std::pair<int, uint64_t>, Run> runs_;
};

Outcome criterion_overfit(Lab& lab) {
  Outcome o;
  const auto t0 = Clock::now();
  TrainConfig c = lab.config_for(Variant::kScorerCbr, 1);
  c.iterations = 1000;
  std::vector<size_t> idx(c.batch_size);
  std::iota(idx.begin(), idx.end(), size_t{0});
  trainer::TrainOptions opt;
  opt.fixed_batch = idx;
  const auto res = trainer::train(lab.train_set(), c, opt);
  const double initial = res.history.front().total;
  const double at200 = res.history[199].total;

  model::RenderedDataset batch_set;
  batch_set.vocab = lab.train_set().vocab;
  for (size_t i : idx) {
    batch_set.pairs.push_back(lab.train_set().pairs[i]);
    batch_set.before.push_back(lab.train_set().before[i]);
    batch_set.after.push_back(lab.train_set().after[i]);
    batch_set.captions.push_back(lab.train_set().captions[i]);
  }
  const auto rep = metrics::evaluate(res.params, batch_set, c);
  const double secs = seconds_since(t0);
  o.pass = at200 < 0.5 * initial && rep.all().exact_match == 1.0 && secs < 120.0;
  o.note("fixed batch of %zu pairs: initial L %.4f, after 200 steps %.4f (ratio %.3f, limit 0.5)", idx.size(),
         initial, at200, at200 / initial);
  o.note("after 1000 steps: L %.4f, exact match on the batch %.3f (need 1.000)", res.history.back().total,
         rep.all().exact_match);
  o.note("runtime %.1f s (limit 120 s)", secs);
  return o;
}

Outcome criterion_end_to_end(Lab& lab) {
  Outcome o;
  const Run& r = lab.run(Variant::kScorerCbr, 1);
  const auto& all = r.report.all();
  const double secs = r.train_seconds + r.eval_seconds;
  o.pass = all.exact_match >= 0.90 && all.bleu4 >= 0.90 && secs < 900.0;
  o.note("desk preset, scorer+cbr, %zu iterations: held-out exact match %.3f (need 0.90), BLEU-4 %.3f (need 0.90)",
         lab.cfg().iterations, all.exact_match, all.bleu4);
  for (const auto& [name, s] : r.report.splits) {
    if (name == "all") continue;
    o.note("  %-10s %3zu pairs: exact match %.3f, BLEU-4 %.3f", name.c_str(), s.count, s.exact_match, s.bleu4);
  }
  // Smoothed caption loss over the first 1000 iterations.
  const auto& h = r.result.history;
  if (h.size() >= 1000) {
    auto window = [&](size_t start) {
      double s = 0.0;
      for (size_t i = start; i < start + 50; ++i) s += h[i].cap;
      return s / 50.0;
    };
    o.note("smoothed L_cap (window 50): iterations 1-50 %.4f, 951-1000 %.4f", window(0), window(950));
  }
  o.note("runtime %.0f s train + %.0f s eval (limit 900 s)", r.train_seconds, r.eval_seconds);
  return o;
}

Outcome criterion_ablation(Lab& lab) {
  Outcome o;
  const std::vector<Variant> order = {Variant::kSubtraction, Variant::kRr, Variant::kScorer, Variant::kScorerCbr};
  std::vector<double> means;
  for (Variant v : order) {
    double sum = 0.0;
    std::string per_seed;
    for (uint64_t seed : {1, 2, 3}) {
      const double em = lab.run(v, seed).report.all().exact_match;
      sum += em;
      char buf[32];
      std::snprintf(buf, sizeof buf, " %.3f", em);
      per_seed += buf;
    }
    means.push_back(sum / 3.0);
    o.note("%-11s mean exact match %.4f (seeds 1-3:%s)", to_string(v).c_str(), means.back(), per_seed.c_str());
  }
  bool ordered = true;
  for (size_t i = 0; i + 1 < means.size(); ++i) ordered = ordered && means[i] <= means[i + 1];
  const double gap = means.back() - means.front();
  o.pass = ordered && gap > 0.0;
  o.note("subtraction <= rr <= scorer <= scorer+cbr: %s; end-to-end gap %.4f (need > 0)", ordered ? "yes" : "no",
         gap);
  return o;
}

Outcome criterion_view_invariance(Lab& lab) {
  Outcome o;
  const Run& scorer_run = lab.run(Variant::kScorer, 1);
  const double margin = scorer_run.report.alignment_margin;
  o.pass = margin >= 0.1;
  o.note("trained scorer: positive %.4f, negative %.4f, margin %.4f (need 0.1)", scorer_run.report.positive_score,
         scorer_run.report.negative_score, margin);
  const Run& full = lab.run(Variant::kScorerCbr, 1);
  o.note("trained scorer+cbr: margin %.4f", full.report.alignment_margin);
  const TrainConfig c = lab.config_for(Variant::kScorer, 1);
  const auto untrained =
      metrics::evaluate(init_params(c.model, changeworld::derive_seed(c.seed, 1)), lab.eval_set(), c);
  o.note("untrained: positive %.4f, negative %.4f, margin %.4f", untrained.positive_score, untrained.negative_score,
         untrained.alignment_margin);
  return o;
}

Outcome criterion_localization(Lab& lab) {
  Outcome o;
  const Run& r = lab.run(Variant::kScorerCbr, 1);
  // A larger held-out set so that at least 200 pairs carry a change.
  const TrainConfig c = lab.config_for(Variant::kScorerCbr, 1);
  const auto held = model::RenderedDataset::build(changeworld::generate_dataset(400, 3, {}),
                                                  changeworld::grammar_vocabulary(), c);
  const auto rep = metrics::evaluate(r.result.params, held, c);
  const auto& sem = rep.splits.at("semantic");
  double chance = 0.0;
  for (const auto& p : held.pairs) {
    if (p.change == changeworld::ChangeType::kDistractor) continue;
    chance += static_cast<double>(metrics::accepted_cells(p).size()) / static_cast<double>(p.cells());
  }
  chance /= static_cast<double>(sem.count);
  o.pass = sem.localized >= 200 && sem.localization >= 3.0 * chance;
  o.note("%zu non-distractor held-out pairs: hit rate %.4f; uniform chance %.4f; ratio %.2f (need 3)",
         sem.localized, sem.localization, chance, sem.localization / chance);
  for (const char* t : {"color", "texture", "add", "drop", "move"}) {
    if (rep.splits.contains(t)) o.note("  %-8s %.3f", t, rep.splits.at(t).localization);
  }
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome criterion_determinism(Lab& lab) {
  Outcome o;
  const fs::path dir = fs::temp_directory_path() / "scorer_acceptance";
  fs::create_directories(dir);
  TrainConfig c = lab.config_for(Variant::kScorerCbr, 5);
  c.iterations = 25;
  trainer::TrainOptions opt;
  opt.checkpoint = dir / "a.ckpt";
  trainer::train(lab.train_set(), c, opt);
  opt.checkpoint = dir / "b.ckpt";
  trainer::train(lab.train_set(), c, opt);
  const bool same_ckpt = slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt");
  o.note("two %zu-iteration runs with seed 5: checkpoints bit-identical: %s", c.iterations, same_ckpt ? "yes" : "no");

  const ParamStore loaded = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(loaded, dir / "c.ckpt");
  const bool round_trip = slurp(dir / "a.ckpt") == slurp(dir / "c.ckpt");
  const ParamStore reloaded = load_checkpoint(dir / "c.ckpt");
  const bool equal = loaded == reloaded;
  o.note("save -> load -> save: bytes identical: %s; tensors identical: %s", round_trip ? "yes" : "no",
         equal ? "yes" : "no");

  changeworld::write_dataset(changeworld::generate_dataset(2000, 1, {}), dir / "d1.jsonl");
  changeworld::write_dataset(changeworld::generate_dataset(2000, 1, {}), dir / "d2.jsonl");
  const bool same_data = slurp(dir / "d1.jsonl") == slurp(dir / "d2.jsonl") &&
                         slurp(dir / "d1.vocab") == slurp(dir / "d2.vocab");
  o.note("dataset generation (2000 pairs, seed 1) byte-identical: %s", same_data ? "yes" : "no");
  fs::remove_all(dir);
  o.pass = same_ckpt && round_trip && equal && same_data;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string which = "1,2,3,4,5,6,7,8,9";
  app.add_option("--criteria", which, "comma-separated criterion numbers");
  app.add_flag("--verbose", g_verbose);
  CLI11_PARSE(app, argc, argv);

  std::set<int> selected;
  std::stringstream ss(which);
  for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));

  const std::vector<std::pair<std::string, std::function<Outcome(Lab&)>>> criteria = {
      {"TM oracle equivalence", [](Lab&) { return criterion_tm(); }},
      {"InfoNCE analytics", [](Lab&) { return criterion_infonce(); }},
      {"gradient suite", [](Lab&) { return criterion_gradients(); }},
      {"overfit sanity", criterion_overfit},
      {"end-to-end learning", criterion_end_to_end},
      {"ablation direction", criterion_ablation},
      {"view invariance", criterion_view_invariance},
      {"localization", criterion_localization},
      {"determinism and persistence", criterion_determinism},
  };
  std::unique_ptr<Lab> lab;
  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.contains(n)) continue;
    if (n >= 4 && !lab) lab = std::make_unique<Lab>();
    Outcome o;
    try {
      o = criteria[i].second(*lab);
    } catch (const std::exception& e) {
      o.pass = false;
      o.note("error: %s", e.what());
    }
    std::printf("criterion %d %s: %s\n", n, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str());
    for (const auto& d : o.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
