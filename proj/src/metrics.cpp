#include "scorer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "scorer/decoder.hpp"
#include "scorer/similarity.hpp"

namespace scorer::metrics {

std::vector<TokenId> content(const CaptionSeq& seq) {
  std::vector<TokenId> out;
  size_t i = !seq.empty() && seq[0] == kBos ? 1 : 0;
  for (; i < seq.size(); ++i) {
    if (seq[i] == kEos || seq[i] == kPad) break;
    out.push_back(seq[i]);
  }
  return out;
}

int exact_match(const CaptionSeq& pred, const CaptionSeq& ref) {
  return content(pred) == content(ref) ? 1 : 0;
}

namespace {

using Gram = std::vector<TokenId>;

std::map<Gram, size_t> ngrams(const std::vector<TokenId>& t, size_t n) {
  std::map<Gram, size_t> out;
  for (size_t i = 0; i + n <= t.size(); ++i) ++out[Gram(t.begin() + i, t.begin() + i + n)];
  return out;
}

}  // namespace

double bleu4(std::span<const CaptionSeq> preds, std::span<const CaptionSeq> refs) {
  if (preds.empty()) throw std::invalid_argument("bleu4: empty corpus");
  if (preds.size() != refs.size()) {
    throw std::invalid_argument("bleu4: prediction and reference counts differ");
  }
  size_t matched[4] = {0, 0, 0, 0};
  size_t total[4] = {0, 0, 0, 0};
  size_t cand_len = 0;
  size_t ref_len = 0;
  for (size_t k = 0; k < preds.size(); ++k) {
    const auto c = content(preds[k]);
    const auto r = content(refs[k]);
    cand_len += c.size();
    ref_len += r.size();
    for (size_t n = 1; n <= 4; ++n) {
      const auto cg = ngrams(c, n);
      const auto rg = ngrams(r, n);
      for (const auto& [g, cnt] : cg) {
        auto it = rg.find(g);
        matched[n - 1] += std::min(cnt, it == rg.end() ? size_t{0} : it->second);
        total[n - 1] += cnt;
      }
    }
  }
  if (cand_len == 0 || matched[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(matched[0]) / static_cast<double>(total[0]));
  for (size_t n = 1; n < 4; ++n) {
    log_sum += std::log((static_cast<double>(matched[n]) + 1.0) /
                        (static_cast<double>(total[n]) + 1.0));
  }
  const double bp = cand_len >= ref_len
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref_len) /
                                             static_cast<double>(cand_len));
  return bp * std::exp(log_sum / 4.0);
}

std::vector<size_t> accepted_cells(const changeworld::ScenePair& pair) {
  std::vector<size_t> out;
  if (pair.changed_before) out.push_back(*pair.changed_before);
  if (pair.changed_after) {
    const size_t c = pair.unshift(*pair.changed_after);
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

std::vector<size_t> change_word_positions(const std::vector<std::string>& words) {
  static const std::vector<std::string> slot_words = {
      "red", "blue", "green", "yellow", "cube", "sphere", "cylinder", "rubber", "metal"};
  std::vector<size_t> out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (words[i] == "next") break;
    if (std::find(slot_words.begin(), slot_words.end(), words[i]) != slot_words.end()) {
      out.push_back(i);
    }
  }
  return out;
}

double localization_score(const std::vector<std::vector<double>>& word_attention,
                          std::span<const size_t> positions,
                          const changeworld::ScenePair& pair) {
  if (pair.change == changeworld::ChangeType::kDistractor) {
    throw std::invalid_argument("localization_score: distractor pairs have no change");
  }
  const size_t n = pair.cells();
  std::vector<double> avg(n, 0.0);
  size_t used = 0;
  for (size_t pos : positions) {
    if (pos >= word_attention.size()) continue;
    const auto& m = word_attention[pos];
    if (m.size() != n) throw ShapeError("localization_score: attention map size mismatch");
    for (size_t j = 0; j < n; ++j) avg[j] += m[j];
    ++used;
  }
  if (used == 0) return 0.0;
  const double best = *std::max_element(avg.begin(), avg.end());
  const auto ok = accepted_cells(pair);
  size_t ties = 0;
  size_t hits = 0;
  for (size_t j = 0; j < n; ++j) {
    if (avg[j] == best) {
      ++ties;
      if (std::find(ok.begin(), ok.end(), j) != ok.end()) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ties);
}

EvalReport evaluate(const ParamStore& params, const model::RenderedDataset& data,
                    const TrainConfig& raw_cfg, const EvalOptions& options) {
  const TrainConfig cfg = raw_cfg.effective();
  check_compatible(params, cfg.model);
  if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  const size_t total = data.size();

  EvalReport rep;
  rep.predictions.resize(total);
  std::vector<double> loc(total, -1.0);

  for (size_t start = 0; start < total; start += options.decode_batch) {
    const size_t stop = std::min(total, start + options.decode_batch);
    std::vector<size_t> idx(stop - start);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto batch = model::make_batch(data, idx);
    const Tensor diff = model::difference_grid(batch, params, cfg);
    const auto g = decoder::greedy_decode(diff, batch.size, params, cfg.model,
                                          cfg.model.max_caption_len);
    for (size_t i = 0; i < idx.size(); ++i) {
      const size_t k = idx[i];
      rep.predictions[k] = g.captions[i];
      const auto& pair = data.pairs[k];
      if (pair.change == changeworld::ChangeType::kDistractor) continue;
      const auto words = data.vocab.decode(g.captions[i]);
      const auto pos = change_word_positions(words);
      loc[k] = localization_score(g.word_attention[i], pos, pair);
    }
  }

  // Alignment margin over blocks of in-batch pairs.
  double pos_sum = 0.0, neg_sum = 0.0;
  size_t pos_n = 0, neg_n = 0;
  for (size_t start = 0; start + 1 < total; start += options.block) {
    const size_t stop = std::min(total, start + options.block);
    if (stop - start < 2) break;
    std::vector<size_t> idx(stop - start);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    const auto batch = model::make_batch(data, idx);
    ad::Tape tape;
    BoundParams p(tape, params, false);
    ad::Var b = encoder::project_grid(tape.constant(batch.raw_before), p, batch.size);
    ad::Var a = encoder::project_grid(tape.constant(batch.raw_after), p, batch.size);
    similarity::AlignmentConfig ac = cfg.alignment;
    ac.sim_mode = similarity::SimMode::kMtm;
    const Tensor s = similarity::batch_similarity(
                         b, a, batch.size, ac,
                         similarity::MtmWeights{p["mtm.wq"], p["mtm.wk"], cfg.model.mtm_heads})
                         .value();
    for (size_t i = 0; i < batch.size; ++i) {
      for (size_t j = 0; j < batch.size; ++j) {
        if (i == j) {
          pos_sum += s.at(i, j);
          ++pos_n;
        } else {
          neg_sum += s.at(i, j);
          ++neg_n;
        }
      }
    }
  }
  if (pos_n > 0 && neg_n > 0) {
    rep.positive_score = pos_sum / static_cast<double>(pos_n);
    rep.negative_score = neg_sum / static_cast<double>(neg_n);
    rep.alignment_margin = rep.positive_score - rep.negative_score;
  }

  // Splits.
  std::map<std::string, std::vector<size_t>> members;
  for (size_t k = 0; k < total; ++k) {
    const auto t = data.pairs[k].change;
    members["all"].push_back(k);
    if (t == changeworld::ChangeType::kDistractor) {
      members["distractor"].push_back(k);
    } else {
      members["semantic"].push_back(k);
      members[std::string(changeworld::name(t))].push_back(k);
    }
  }
  for (const auto& [split, ks] : members) {
    SplitStats st;
    st.count = ks.size();
    std::vector<CaptionSeq> p, r;
    size_t em = 0;
    double loc_sum = 0.0;
    for (size_t k : ks) {
      em += static_cast<size_t>(exact_match(rep.predictions[k], data.captions[k]));
      p.push_back(rep.predictions[k]);
      r.push_back(data.captions[k]);
      if (loc[k] >= 0.0) {
        loc_sum += loc[k];
        ++st.localized;
      }
    }
    st.exact_match = static_cast<double>(em) / static_cast<double>(st.count);
    st.bleu4 = bleu4(p, r);
    st.localization = st.localized ? loc_sum / static_cast<double>(st.localized) : 0.0;
    rep.splits[split] = st;
  }
  return rep;
}

namespace {

const std::vector<std::string>& split_order() {
  static const std::vector<std::string> order = {
      "all", "semantic", "distractor", "color", "texture", "add", "drop", "move"};
  return order;
}

}  // namespace

void write_report_csv(const EvalReport& r, std::ostream& out) {
  out.precision(17);
  out << "split,metric,value,count\n";
  for (const auto& name : split_order()) {
    auto it = r.splits.find(name);
    if (it == r.splits.end()) continue;
    const SplitStats& s = it->second;
    out << name << ",exact_match," << s.exact_match << ',' << s.count << '\n';
    out << name << ",bleu4," << s.bleu4 << ',' << s.count << '\n';
    if (s.localized > 0) {
      out << name << ",localization," << s.localization << ',' << s.localized << '\n';
    }
  }
  const size_t n = r.all().count;
  out << "all,positive_score," << r.positive_score << ',' << n << '\n';
  out << "all,negative_score," << r.negative_score << ',' << n << '\n';
  out << "all,alignment_margin," << r.alignment_margin << ',' << n << '\n';
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& name : split_order()) {
    auto it = r.splits.find(name);
    if (it == r.splits.end()) continue;
    const SplitStats& s = it->second;
    os << name << " (" << s.count << " pairs): exact match " << s.exact_match
       << ", BLEU-4 " << s.bleu4;
    if (s.localized > 0) os << ", localization " << s.localization;
    os << '\n';
  }
  os << "alignment: positive " << r.positive_score << ", negative " << r.negative_score
     << ", margin " << r.alignment_margin << '\n';
  return os.str();
}

}  // namespace scorer::metrics
