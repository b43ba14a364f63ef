#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "scorer/changeworld.hpp"
#include "scorer/metrics.hpp"

using namespace scorer;
using namespace scorer::metrics;

namespace {

// Straight counting BLEU-4 with no maps: clipped matches found by scanning.
double bleu_oracle(const std::vector<std::vector<TokenId>>& cands,
                   const std::vector<std::vector<TokenId>>& refs) {
  double matched[4] = {}, total[4] = {};
  double c_len = 0, r_len = 0;
  for (size_t k = 0; k < cands.size(); ++k) {
    const auto& c = cands[k];
    const auto& r = refs[k];
    c_len += static_cast<double>(c.size());
    r_len += static_cast<double>(r.size());
    for (size_t n = 1; n <= 4; ++n) {
      if (c.size() < n) continue;
      std::vector<bool> used(r.size() >= n ? r.size() - n + 1 : 0, false);
      for (size_t i = 0; i + n <= c.size(); ++i) {
        total[n - 1] += 1;
        for (size_t j = 0; j < used.size(); ++j) {
          if (used[j]) continue;
          if (std::equal(c.begin() + i, c.begin() + i + n, r.begin() + j)) {
            used[j] = true;
            matched[n - 1] += 1;
            break;
          }
        }
      }
    }
  }
  if (c_len == 0 || matched[0] == 0) return 0.0;
  double lp = std::log(matched[0] / total[0]);
  for (int n = 1; n < 4; ++n) lp += std::log((matched[n] + 1) / (total[n] + 1));
  const double bp = c_len >= r_len ? 1.0 : std::exp(1.0 - r_len / c_len);
  return bp * std::exp(lp / 4.0);
}

CaptionSeq wrap(const std::vector<TokenId>& t) {
  CaptionSeq s = {kBos};
  s.insert(s.end(), t.begin(), t.end());
  s.push_back(kEos);
  return s;
}

}  // namespace

TEST_CASE("exact match") {
  CHECK(exact_match({kBos, 4, 5, kEos}, {kBos, 4, 5, kEos}) == 1);
  CHECK(exact_match({kBos, 4, 5, kEos, kPad, kPad}, {kBos, 4, 5, kEos}) == 1);
  CHECK(exact_match({kBos, 4, 5, kEos, 9}, {kBos, 4, 5, kEos}) == 1);
  CHECK(exact_match({kBos, 4, kEos}, {kBos, 4, 5, kEos}) == 0);
  CHECK(exact_match({kBos, 4, 5, 6}, {kBos, 4, 5, kEos}) == 0);
  CHECK(content({kBos, 7, 8, kEos, 3}) == std::vector<TokenId>{7, 8});
}

TEST_CASE("BLEU-4") {
  const std::vector<CaptionSeq> refs = {wrap({4, 5, 6, 7, 8}), wrap({9, 10, 11, 12})};
  CHECK(bleu4(refs, refs) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<CaptionSeq> disjoint = {wrap({20, 21, 22, 23, 24}), wrap({25, 26, 27, 28})};
  CHECK(bleu4(disjoint, refs) == 0.0);
  CHECK(bleu4(std::vector<CaptionSeq>{{kBos, kEos}}, std::vector<CaptionSeq>{wrap({4})}) == 0.0);
  CHECK_THROWS(bleu4(std::vector<CaptionSeq>{}, std::vector<CaptionSeq>{}));
  CHECK_THROWS(bleu4(refs, std::vector<CaptionSeq>{refs[0]}));

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<TokenId> tok(4, 9);
  std::uniform_int_distribution<size_t> len(1, 9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<TokenId>> c(6), r(6);
    std::vector<CaptionSeq> cs, rs;
    for (size_t k = 0; k < 6; ++k) {
      c[k].resize(len(rng));
      r[k].resize(len(rng));
      for (auto& x : c[k]) x = tok(rng);
      for (auto& x : r[k]) x = tok(rng);
      cs.push_back(wrap(c[k]));
      rs.push_back(wrap(r[k]));
    }
    const double b = bleu4(cs, rs);
    CHECK(std::abs(b - bleu_oracle(c, r)) < 1e-12);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
    // Corpus order does not matter.
    std::vector<size_t> perm = {3, 0, 5, 1, 4, 2};
    std::vector<CaptionSeq> cp, rp;
    for (size_t i : perm) {
      cp.push_back(cs[i]);
      rp.push_back(rs[i]);
    }
    CHECK(bleu4(cp, rp) == doctest::Approx(b).epsilon(1e-14));
  }
}

TEST_CASE("change word positions") {
  using W = std::vector<std::string>;
  CHECK(change_word_positions(W{"the", "red", "cube", "changed", "to", "blue"}) ==
        std::vector<size_t>{1, 2, 5});
  CHECK(change_word_positions(W{"the", "red", "cube", "moved", "next", "to", "the", "blue", "sphere"}) ==
        std::vector<size_t>{1, 2});
  CHECK(change_word_positions(W{"no", "change", "was", "made"}).empty());
}

TEST_CASE("localization") {
  changeworld::ScenePair p;
  p.height = 2;
  p.width = 2;
  p.view_dy = 1;
  p.view_dx = 0;
  p.change = changeworld::ChangeType::kMove;
  p.changed_before = 0;
  p.changed_after = p.shift(3);
  CHECK(accepted_cells(p) == std::vector<size_t>{0, 3});
  const std::vector<size_t> pos = {1, 2};
  std::vector<std::vector<double>> att(4, std::vector<double>(4, 0.0));
  att[1] = {0.7, 0.1, 0.1, 0.1};
  att[2] = {0.6, 0.2, 0.1, 0.1};
  CHECK(localization_score(att, pos, p) == 1.0);
  att[1] = {0.1, 0.7, 0.1, 0.1};
  att[2] = {0.1, 0.7, 0.1, 0.1};
  CHECK(localization_score(att, pos, p) == 0.0);
  att[1] = att[2] = {0.25, 0.25, 0.25, 0.25};
  CHECK(localization_score(att, pos, p) == 0.5);
  CHECK(localization_score(att, std::vector<size_t>{}, p) == 0.0);
  p.change = changeworld::ChangeType::kDistractor;
  CHECK_THROWS(localization_score(att, pos, p));

  SUBCASE("random attention sits at chance") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double hits = 0.0, chance = 0.0;
    size_t n = 0;
    for (const auto& q : changeworld::generate_dataset(1500, 77, {})) {
      if (q.change == changeworld::ChangeType::kDistractor) continue;
      std::vector<std::vector<double>> a(3, std::vector<double>(q.cells()));
      for (auto& row : a) {
        for (double& v : row) v = u(rng);
      }
      hits += localization_score(a, std::vector<size_t>{0, 1, 2}, q);
      chance += static_cast<double>(accepted_cells(q).size()) / static_cast<double>(q.cells());
      ++n;
    }
    CHECK(n >= 1000);
    const double p_hat = hits / static_cast<double>(n), p0 = chance / static_cast<double>(n);
    CHECK(std::abs(p_hat - p0) <= 4.0 * std::sqrt(p0 * (1.0 - p0) / static_cast<double>(n)));
  }
}

TEST_CASE("evaluate") {
  TrainConfig cfg = preset("desk");
  const auto data = model::RenderedDataset::build(changeworld::generate_dataset(60, 3, {}),
                                                  changeworld::grammar_vocabulary(), cfg);
  ParamStore params = init_params(cfg.model, 1);
  const auto rep = evaluate(params, data, cfg, {8, 16});
  REQUIRE(rep.predictions.size() == 60);
  const auto& all = rep.all();
  const auto& sem = rep.splits.at("semantic");
  const auto& dis = rep.splits.at("distractor");
  CHECK(all.count == 60);
  CHECK(sem.count + dis.count == 60);
  size_t typed = 0;
  double em = 0.0;
  for (const char* t : {"color", "texture", "add", "drop", "move"}) {
    if (!rep.splits.contains(t)) continue;
    typed += rep.splits.at(t).count;
    em += rep.splits.at(t).exact_match * static_cast<double>(rep.splits.at(t).count);
  }
  CHECK(typed == sem.count);
  CHECK(em == doctest::Approx(sem.exact_match * static_cast<double>(sem.count)));
  CHECK(all.exact_match * 60 ==
        doctest::Approx(sem.exact_match * static_cast<double>(sem.count) +
                        dis.exact_match * static_cast<double>(dis.count)));
  CHECK(sem.localized == sem.count);
  CHECK(dis.localized == 0);
  CHECK(rep.alignment_margin == doctest::Approx(rep.positive_score - rep.negative_score));
  // Decoding in different chunk sizes does not change predictions.
  CHECK(evaluate(params, data, cfg, {8, 7}).predictions == rep.predictions);

  SUBCASE("predictions equal to references score 1") {
    // A decoder rigged to copy nothing cannot match, so compare against
    // a report whose references are its own predictions.
    model::RenderedDataset self = data;
    self.captions = rep.predictions;
    for (auto& c : self.captions) {
      if (c.back() != kEos) c.push_back(kEos);
    }
    const auto again = evaluate(params, self, cfg, {8, 16});
    CHECK(again.all().exact_match == 1.0);
    CHECK(again.all().bleu4 == doctest::Approx(1.0).epsilon(1e-12));
  }
  std::ostringstream csv;
  write_report_csv(rep, csv);
  CHECK(csv.str().rfind("split,metric,value,count\n", 0) == 0);
  CHECK(csv.str().find("all,alignment_margin,") != std::string::npos);
  CHECK(format_report(rep).find("margin") != std::string::npos);
}
