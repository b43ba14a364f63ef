// Python bindings over scorer_core.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "scorer/changeworld.hpp"
#include "scorer/gradcheck.hpp"
#include "scorer/metrics.hpp"
#include "scorer/similarity.hpp"
#include "scorer/trainer.hpp"

namespace py = pybind11;
using namespace scorer;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() != 2) throw std::invalid_argument("expected a 2-D array");
  const auto r = static_cast<size_t>(a.shape(0)), c = static_cast<size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

TrainConfig make_config(const std::string& preset_name, const std::map<std::string, std::string>& overrides) {
  TrainConfig cfg = preset(preset_name);
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  cfg.validate();
  return cfg;
}

model::RenderedDataset load(const std::filesystem::path& path, const TrainConfig& cfg) {
  return model::RenderedDataset::build(changeworld::read_dataset(path), changeworld::grammar_vocabulary(), cfg);
}

py::dict split_dict(const metrics::SplitStats& s) {
  py::dict d;
  d["count"] = s.count;
  d["exact_match"] = s.exact_match;
  d["bleu4"] = s.bleu4;
  d["localized"] = s.localized;
  d["localization"] = s.localization;
  return d;
}

}  // namespace

PYBIND11_MODULE(_scorer, m) {
  m.doc() = "SCORER + CBR change captioning on a synthetic change-world";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("preset", [](const std::string& name) { return preset(name).to_map(); }, py::arg("name") = "desk",
        "Effective key=value map of a named preset.");

  m.def(
      "generate_dataset_jsonl",
      [](size_t count, uint64_t seed, size_t height, size_t width, double distractor_rate, size_t max_view_shift) {
        changeworld::GeneratorConfig g;
        g.height = height;
        g.width = width;
        g.distractor_rate = distractor_rate;
        g.max_view_shift = max_view_shift;
        std::vector<std::string> lines;
        for (const auto& p : changeworld::generate_dataset(count, seed, g)) {
          lines.push_back(changeworld::to_json_line(p));
        }
        return lines;
      },
      py::arg("count"), py::arg("seed"), py::arg("height") = 4, py::arg("width") = 4,
      py::arg("distractor_rate") = 0.2, py::arg("max_view_shift") = 1);

  m.def(
      "write_dataset",
      [](const std::filesystem::path& path, size_t count, uint64_t seed, double distractor_rate,
         size_t max_view_shift) {
        changeworld::GeneratorConfig g;
        g.distractor_rate = distractor_rate;
        g.max_view_shift = max_view_shift;
        changeworld::write_dataset(changeworld::generate_dataset(count, seed, g), path);
      },
      py::arg("path"), py::arg("count"), py::arg("seed"), py::arg("distractor_rate") = 0.2,
      py::arg("max_view_shift") = 1);

  m.def("vocabulary", [] { return changeworld::grammar_vocabulary().words(); });

  m.def(
      "tm_similarity", [](const Array& q, const Array& k) { return similarity::tm_similarity(to_tensor(q), to_tensor(k)); },
      py::arg("q"), py::arg("k"));
  m.def(
      "mtm_similarity",
      [](const Array& q, const Array& k, const Array& wq, const Array& wk, size_t heads) {
        return similarity::mtm_similarity(to_tensor(q), to_tensor(k), to_tensor(wq), to_tensor(wk), heads);
      },
      py::arg("q"), py::arg("k"), py::arg("w_query"), py::arg("w_key"), py::arg("heads"));
  m.def(
      "info_nce", [](const Array& s, double tau) { return similarity::info_nce_bidirectional(to_tensor(s), tau); },
      py::arg("scores"), py::arg("temperature"));

  m.def(
      "bleu4",
      [](const std::vector<std::vector<std::string>>& preds, const std::vector<std::vector<std::string>>& refs) {
        Vocabulary v = changeworld::grammar_vocabulary();
        std::vector<CaptionSeq> p, r;
        for (const auto& w : preds) p.push_back(v.encode(w));
        for (const auto& w : refs) r.push_back(v.encode(w));
        return metrics::bleu4(p, r);
      },
      py::arg("predictions"), py::arg("references"), "Corpus BLEU-4 over grammar words.");

  m.def("gradcheck_cases", &gradcheck::case_names);
  m.def(
      "gradcheck",
      [](const std::string& name, uint64_t seed) {
        return gradcheck::check(gradcheck::make_case(name, seed)).max_rel_error;
      },
      py::arg("name"), py::arg("seed") = 1, "Maximum relative error of the finite-difference check.");

  m.def(
      "train",
      [](const std::filesystem::path& data, const std::filesystem::path& checkpoint, const std::string& preset_name,
         const std::map<std::string, std::string>& overrides) {
        const TrainConfig cfg = make_config(preset_name, overrides);
        trainer::TrainOptions opt;
        opt.checkpoint = checkpoint;
        std::vector<trainer::LossRecord> records;
        {
          py::gil_scoped_release release;
          records = trainer::train(load(data, cfg), cfg, opt).history;
        }
        py::list history;
        for (const auto& r : records) {
          py::dict d;
          d["iter"] = r.iter;
          d["L_total"] = r.total;
          d["L_cap"] = r.cap;
          d["L_cv"] = r.cv;
          d["L_cm"] = r.cm;
          history.append(d);
        }
        return history;
      },
      py::arg("data"), py::arg("checkpoint"), py::arg("preset") = "desk",
      py::arg("overrides") = std::map<std::string, std::string>{}, "Trains and returns the per-iteration losses.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& data, const std::filesystem::path& checkpoint, const std::string& preset_name,
         const std::map<std::string, std::string>& overrides) {
        const TrainConfig cfg = make_config(preset_name, overrides);
        const auto ds = load(data, cfg);
        const auto rep = metrics::evaluate(load_checkpoint(checkpoint), ds, cfg);
        py::dict out, splits;
        for (const auto& [name, s] : rep.splits) splits[py::str(name)] = split_dict(s);
        out["splits"] = splits;
        out["positive_score"] = rep.positive_score;
        out["negative_score"] = rep.negative_score;
        out["alignment_margin"] = rep.alignment_margin;
        std::vector<std::string> captions;
        for (const auto& c : rep.predictions) captions.push_back(ds.vocab.to_text(c));
        out["predictions"] = captions;
        return out;
      },
      py::arg("data"), py::arg("checkpoint"), py::arg("preset") = "desk",
      py::arg("overrides") = std::map<std::string, std::string>{});
}
