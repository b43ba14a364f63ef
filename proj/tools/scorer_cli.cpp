// Command-line front end: gen-data, train, eval, gradcheck, inspect, sweep.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "scorer/changeworld.hpp"
#include "scorer/gradcheck.hpp"
#include "scorer/metrics.hpp"
#include "scorer/trainer.hpp"

namespace fs = std::filesystem;
using namespace scorer;

namespace {

constexpr int kUsage = 1;
constexpr int kFailure = 2;

/// Raised for bad flag combinations detected after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string preset = "desk";
  std::string config;
  std::vector<std::string> sets;
  std::string variant;

  void attach(CLI::App* app) {
    app->add_option("--preset", preset, "desk or clevr-change")->capture_default_str();
    app->add_option("--config", config, "key=value config file");
    app->add_option("--set", sets, "key=value override (repeatable)");
    app->add_option("--variant", variant,
                    "subtraction | rr | scorer | rr+cbr | scorer+cbr");
  }

  TrainConfig resolve(const fs::path& fallback_config = {}) const {
    TrainConfig cfg = scorer::preset(preset);
    if (!config.empty()) {
      cfg = load_config(config, cfg);
    } else if (!fallback_config.empty() && fs::exists(fallback_config)) {
      cfg = load_config(fallback_config, cfg);
    }
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!variant.empty()) cfg.variant = parse_variant(variant);
    return cfg.effective();
  }
};

void print_config(const TrainConfig& cfg) {
  std::cout << "# effective config\n" << format_config(cfg) << "# end config\n";
}

model::RenderedDataset load_data(const fs::path& path, const TrainConfig& cfg) {
  auto pairs = changeworld::read_dataset(path);
  const fs::path vp = changeworld::vocabulary_path(path);
  Vocabulary vocab = fs::exists(vp) ? Vocabulary::load(vp) : changeworld::grammar_vocabulary();
  return model::RenderedDataset::build(std::move(pairs), std::move(vocab), cfg);
}

fs::path config_path_for(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p += ".cfg";
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// --- gen-data ---------------------------------------------------------------

struct GenFlags {
  std::string out;
  size_t pairs = 2000;
  std::string grid = "4x4";
  uint64_t seed = 1;
  double distractor_rate = 0.2;
  size_t max_view_shift = 1;
};

int run_gen(const GenFlags& f) {
  changeworld::GeneratorConfig g;
  const auto x = f.grid.find('x');
  if (x == std::string::npos) throw UsageError("--grid expects HxW, e.g. 4x4");
  try {
    g.height = std::stoul(f.grid.substr(0, x));
    g.width = std::stoul(f.grid.substr(x + 1));
  } catch (const std::exception&) {
    throw UsageError("--grid expects HxW, e.g. 4x4");
  }
  if (g.height * g.width < 2) throw UsageError("--grid must hold at least 2 cells");
  g.max_objects = std::min(g.max_objects, g.height * g.width);
  g.min_objects = std::min(g.min_objects, g.max_objects);
  g.distractor_rate = f.distractor_rate;
  g.max_view_shift = f.max_view_shift;
  std::cout << "# effective config\nout=" << f.out << "\npairs=" << f.pairs
            << "\ngrid=" << g.height << "x" << g.width << "\nseed=" << f.seed
            << "\ndistractor_rate=" << f.distractor_rate
            << "\nmax_view_shift=" << f.max_view_shift << "\n# end config\n";
  const auto pairs = changeworld::generate_dataset(f.pairs, f.seed, g);
  changeworld::write_dataset(pairs, f.out);
  std::map<std::string, size_t> counts;
  for (size_t t = 0; t < changeworld::kChangeTypes; ++t) {
    counts[std::string(changeworld::name(static_cast<changeworld::ChangeType>(t)))] = 0;
  }
  for (const auto& p : pairs) ++counts[std::string(changeworld::name(p.change))];
  std::cout << "wrote " << pairs.size() << " pairs to " << f.out << ":";
  for (const auto& [k, v] : counts) std::cout << ' ' << k << '=' << v;
  std::cout << '\n';
  return 0;
}

// --- train ------------------------------------------------------------------

struct TrainFlags {
  ConfigFlags cfg;
  std::string data;
  std::string out;
  std::string log;
};

trainer::TrainResult train_to(const model::RenderedDataset& data, const TrainConfig& cfg,
                              const fs::path& out, const fs::path& log) {
  trainer::TrainOptions opt;
  opt.checkpoint = out;
  opt.metrics_csv = log;
  auto res = trainer::train(data, cfg, opt);
  write_text(config_path_for(out), format_config(cfg));
  return res;
}

int run_train(const TrainFlags& f) {
  const TrainConfig cfg = f.cfg.resolve();
  cfg.validate();
  print_config(cfg);
  const auto data = load_data(f.data, cfg);
  fs::path log = f.log.empty() ? fs::path(f.out).replace_extension(".csv") : fs::path(f.log);
  const auto res = train_to(data, cfg, f.out, log);
  const auto& last = res.history.empty() ? trainer::LossRecord{} : res.history.back();
  std::printf("final loss %.6f (L_cap %.6f, L_cv %.6f, L_cm %.6f) after %zu iterations\n",
              last.total, last.cap, last.cv, last.cm, res.history.size());
  std::cout << "checkpoint " << f.out << "\nloss log " << log.string() << '\n';
  return 0;
}

// --- eval -------------------------------------------------------------------

struct EvalFlags {
  ConfigFlags cfg;
  std::string data;
  std::string checkpoint;
  std::string report;
};

int run_eval(const EvalFlags& f) {
  const TrainConfig cfg = f.cfg.resolve(config_path_for(f.checkpoint));
  print_config(cfg);
  const ParamStore params = load_checkpoint(f.checkpoint);
  check_compatible(params, cfg.model);
  const auto data = load_data(f.data, cfg);
  const auto rep = metrics::evaluate(params, data, cfg);
  const fs::path csv =
      f.report.empty() ? fs::path(f.checkpoint).replace_extension(".report.csv") : fs::path(f.report);
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  metrics::write_report_csv(rep, out);
  std::cout << metrics::format_report(rep) << "report " << csv.string() << '\n';
  return 0;
}

// --- gradcheck --------------------------------------------------------------

int run_gradcheck(const std::string& ops, uint64_t seed) {
  std::vector<std::string> names;
  if (ops == "all") {
    names = gradcheck::case_names();
  } else {
    const auto all = gradcheck::case_names();
    if (std::find(all.begin(), all.end(), ops) == all.end()) {
      throw UsageError("unknown op '" + ops + "'");
    }
    names = {ops};
  }
  std::cout << "# effective config\nops=" << ops << "\nseed=" << seed
            << "\nstep=0.0001\ntolerance=0.0001\n# end config\n";
  bool ok = true;
  for (const auto& n : names) {
    const auto r = gradcheck::check(gradcheck::make_case(n, seed));
    const bool pass = r.max_rel_error < 1e-4;
    ok = ok && pass;
    std::printf("%-22s max_rel_error %.3e over %zu entries %s\n", n.c_str(), r.max_rel_error,
                r.checked, pass ? "ok" : "FAIL");
  }
  return ok ? 0 : kFailure;
}

// --- inspect ----------------------------------------------------------------

struct InspectFlags {
  ConfigFlags cfg;
  std::string checkpoint;
  std::string data;
  uint64_t pair_id = 0;
  std::string out;
};

std::string pgm(const std::vector<double>& att, size_t h, size_t w) {
  const double hi = *std::max_element(att.begin(), att.end());
  std::ostringstream os;
  os << "P2\n" << w << ' ' << h << "\n255\n";
  for (size_t r = 0; r < h; ++r) {
    for (size_t c = 0; c < w; ++c) {
      const double v = hi > 0.0 ? att[r * w + c] / hi : 0.0;
      os << (c ? " " : "") << static_cast<int>(std::lround(v * 255.0));
    }
    os << '\n';
  }
  return os.str();
}

int run_inspect(const InspectFlags& f) {
  const TrainConfig cfg = f.cfg.resolve(config_path_for(f.checkpoint));
  print_config(cfg);
  const ParamStore params = load_checkpoint(f.checkpoint);
  check_compatible(params, cfg.model);
  const auto data = load_data(f.data, cfg);
  size_t k = data.size();
  for (size_t i = 0; i < data.size(); ++i) {
    if (data.pairs[i].id == f.pair_id) k = i;
  }
  if (k == data.size()) throw std::runtime_error("no pair with id " + std::to_string(f.pair_id));
  const std::vector<size_t> idx = {k};
  const auto batch = model::make_batch(data, idx);
  const auto g = decoder::greedy_decode(model::difference_grid(batch, params, cfg), 1, params,
                                        cfg.model, cfg.model.max_caption_len);
  fs::create_directories(f.out);
  const auto words = data.vocab.decode(g.captions[0]);
  for (size_t i = 0; i < words.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "word_%02zu_%s.pgm", i, words[i].c_str());
    write_text(fs::path(f.out) / name, pgm(g.word_attention[0][i], cfg.model.grid_h, cfg.model.grid_w));
  }
  const std::string text = "predicted: " + data.vocab.to_text(g.captions[0]) +
                           "\nreference: " + data.vocab.to_text(data.captions[k]) + "\n";
  write_text(fs::path(f.out) / "caption.txt", text);
  std::cout << text << "wrote " << words.size() << " heatmaps to " << f.out << '\n';
  return 0;
}

// --- sweep ------------------------------------------------------------------

struct SweepFlags {
  ConfigFlags cfg;
  std::string param;
  std::vector<std::string> values;
  std::string data;
  std::string eval_data;
  std::string out;
};

int run_sweep(const SweepFlags& f) {
  static const std::map<std::string, std::vector<std::string>> keys = {
      {"heads", {"mtm_heads"}},
      {"layers", {"encoder_layers"}},
      {"lambda_v", {"lambda_v"}},
      {"lambda_m", {"lambda_m"}}};
  const TrainConfig base = f.cfg.resolve();
  print_config(base);
  std::ofstream csv(f.out, std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + f.out);
  csv.precision(17);
  csv << "param,value,exact_match,bleu4,localization,alignment_margin,final_loss\n";
  const fs::path dir = fs::path(f.out).parent_path();
  for (const auto& value : f.values) {
    TrainConfig cfg = base;
    for (const auto& key : keys.at(f.param)) cfg.set(key, value);
    cfg = cfg.effective();
    cfg.validate();
    const auto data = load_data(f.data, cfg);
    const auto eval = load_data(f.eval_data.empty() ? f.data : f.eval_data, cfg);
    const fs::path ckpt = dir / ("sweep_" + f.param + "_" + value + ".ckpt");
    fs::path log = ckpt;
    log.replace_extension(".csv");
    const auto res = train_to(data, cfg, ckpt, log);
    const auto rep = metrics::evaluate(res.params, eval, cfg);
    const auto& all = rep.all();
    const double loc = rep.splits.contains("semantic") ? rep.splits.at("semantic").localization : 0.0;
    csv << f.param << ',' << value << ',' << all.exact_match << ',' << all.bleu4 << ',' << loc
        << ',' << rep.alignment_margin << ','
        << (res.history.empty() ? 0.0 : res.history.back().total) << '\n';
    std::cout << f.param << '=' << value << ": exact match " << all.exact_match << ", BLEU-4 "
              << all.bleu4 << '\n';
  }
  std::cout << "sweep " << f.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SCORER + CBR change captioning on a synthetic change-world"};
  app.require_subcommand(1);

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a scene-pair dataset");
  gen_cmd->add_option("--out", gen.out, "dataset path (.jsonl)")->required();
  gen_cmd->add_option("--pairs", gen.pairs)->capture_default_str();
  gen_cmd->add_option("--grid", gen.grid, "HxW")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
  gen_cmd->add_option("--distractor-rate", gen.distractor_rate)
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--max-view-shift", gen.max_view_shift, "largest cyclic view shift per axis")
      ->capture_default_str();

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  tr.cfg.attach(train_cmd);
  train_cmd->add_option("--data", tr.data)->required();
  train_cmd->add_option("--out", tr.out, "checkpoint path")->required();
  train_cmd->add_option("--log", tr.log, "loss CSV (default: checkpoint path with .csv)");

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  ev.cfg.attach(eval_cmd);
  eval_cmd->add_option("--data", ev.data)->required();
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--report", ev.report, "report CSV path");

  std::string ops = "all";
  uint64_t gc_seed = 1;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc_cmd->add_option("--ops", ops, "all or one op name")->capture_default_str();
  gc_cmd->add_option("--seed", gc_seed)->capture_default_str();

  InspectFlags in;
  auto* inspect_cmd = app.add_subcommand("inspect", "write per-word attention heatmaps");
  in.cfg.attach(inspect_cmd);
  inspect_cmd->add_option("--checkpoint", in.checkpoint)->required();
  inspect_cmd->add_option("--data", in.data)->required();
  inspect_cmd->add_option("--pair-id", in.pair_id)->required();
  inspect_cmd->add_option("--out", in.out, "output directory")->required();

  SweepFlags sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate one run per value");
  sw.cfg.attach(sweep_cmd);
  sweep_cmd->add_option("--param", sw.param)
      ->required()
      ->check(CLI::IsMember({"heads", "layers", "lambda_v", "lambda_m"}));
  sweep_cmd->add_option("--values", sw.values)->required();
  sweep_cmd->add_option("--data", sw.data)->required();
  sweep_cmd->add_option("--eval-data", sw.eval_data);
  sweep_cmd->add_option("--out", sw.out, "sweep CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*gc_cmd) return run_gradcheck(ops, gc_seed);
    if (*inspect_cmd) return run_inspect(in);
    if (*sweep_cmd) return run_sweep(sw);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}
