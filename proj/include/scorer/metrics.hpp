#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "scorer/changeworld.hpp"
#include "scorer/model.hpp"
#include "scorer/vocab.hpp"

namespace scorer::metrics {

/// Tokens strictly between BOS and the first EOS (PAD also ends the caption).
std::vector<TokenId> content(const CaptionSeq& seq);

/// 1 iff the content tokens are identical.
int exact_match(const CaptionSeq& pred, const CaptionSeq& ref);

/// Corpus BLEU-4 over content tokens: clipped n-gram precisions for n = 1..4,
/// add-one smoothing for n >= 2, brevity penalty. Throws on an empty corpus.
double bleu4(std::span<const CaptionSeq> preds, std::span<const CaptionSeq> refs);

/// Grid cells that count as the change location: changed_before and the
/// after-frame changed cell mapped back into the before frame.
std::vector<size_t> accepted_cells(const changeworld::ScenePair& pair);

/// Positions (0-based, over the words following BOS) of the attribute and
/// shape words that describe the changed object, i.e. every color, shape or
/// material word before a referent clause.
std::vector<size_t> change_word_positions(const std::vector<std::string>& words);

/// Averages the word maps at `positions`, takes the argmax cell, and scores it
/// against the accepted cells. Tied maxima share the hit: the result is the
/// fraction of tied cells that are accepted, so it is 0 or 1 unless the map
/// has ties.
double localization_score(const std::vector<std::vector<double>>& word_attention,
                          std::span<const size_t> positions,
                          const changeworld::ScenePair& pair);

struct SplitStats {
  size_t count = 0;
  double exact_match = 0.0;
  double bleu4 = 0.0;
  size_t localized = 0;  // pairs entering the localization average
  double localization = 0.0;
};

struct EvalReport {
  /// "all", "semantic", "distractor", then one entry per change type present.
  std::map<std::string, SplitStats> splits;
  double positive_score = 0.0;  // mean MTM score of matched pairs
  double negative_score = 0.0;  // mean MTM score to other in-batch afters
  double alignment_margin = 0.0;
  std::vector<CaptionSeq> predictions;

  const SplitStats& all() const { return splits.at("all"); }
};

struct EvalOptions {
  /// Pairs per similarity block (in-batch negatives come from the same block).
  size_t block = 32;
  /// Pairs decoded together.
  size_t decode_batch = 64;
};

EvalReport evaluate(const ParamStore& params, const model::RenderedDataset& data,
                    const TrainConfig& cfg, const EvalOptions& options = {});

/// CSV with header split,metric,value,count.
void write_report_csv(const EvalReport& r, std::ostream& out);
std::string format_report(const EvalReport& r);

}  // namespace scorer::metrics
