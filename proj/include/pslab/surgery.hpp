#pragma once

// Knowledge-vector surgery. For one concept: average the MLP coefficients
// over its related questions (m) and over irrelevant questions (m*), rank
// value vectors per layer by |m_j - m*_j|, zero the coefficients of the top
// fraction k in every maskable layer, and compare accuracy on the two
// question sets. The Parameter Specialization Score is
//
//     PSS = |general_after - specific_after| / general_before
//
// where general_before is the unmasked accuracy over related and irrelevant
// questions together.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pslab/corpus.hpp"
#include "pslab/error.hpp"
#include "pslab/model.hpp"

namespace pslab {

using LayerVectors = std::vector<std::vector<double>>;
using Ranking = std::vector<std::vector<std::size_t>>;

// Which token positions of the "question ... answer : <gold>" prompt feed the coefficient average.
enum class PositionSelector : std::uint8_t {
  kAnswer = 0,            // the gold answer tokens
  kAnswerPredicting = 1,  // the positions whose next token is an answer token
  kAll = 2,
  kLast = 3,
};

inline std::string_view to_string(PositionSelector s) {
  switch (s) {
    case PositionSelector::kAnswer: return "answer";
    case PositionSelector::kAnswerPredicting: return "answer-predicting";
    case PositionSelector::kAll: return "all";
    case PositionSelector::kLast: return "last";
  }
  return "unknown";
}

inline PositionSelector parse_position_selector(std::string_view name) {
  for (auto s : {PositionSelector::kAnswer, PositionSelector::kAnswerPredicting, PositionSelector::kAll,
                 PositionSelector::kLast}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown position selector '" + std::string(name) + "'");
}

inline std::vector<std::size_t> select_positions(PositionSelector selector, std::size_t prompt_length,
                                                 std::span<const std::size_t> answer_positions) {
  std::vector<std::size_t> out;
  switch (selector) {
    case PositionSelector::kAnswer: out.assign(answer_positions.begin(), answer_positions.end()); break;
    case PositionSelector::kAnswerPredicting:
      for (std::size_t p : answer_positions) out.push_back(p - 1);
      break;
    case PositionSelector::kAll:
      out.resize(prompt_length);
      std::iota(out.begin(), out.end(), std::size_t{0});
      break;
    case PositionSelector::kLast: out.push_back(prompt_length - 1); break;
  }
  return out;
}

// ---------------------------------------------------------------- coefficients

// Element-wise mean over every retained row of every trace, per layer.
template <typename T>
LayerVectors mean_coefficients(std::span<const CoefficientTrace<T>> traces) {
  LayerVectors sums;
  std::size_t count = 0;
  for (const auto& trace : traces) {
    if (sums.empty()) {
      for (const auto& layer : trace.layers) sums.emplace_back(layer.cols(), 0.0);
    }
    if (trace.layers.size() != sums.size()) throw DimensionError("mean_coefficients: traces disagree on layer count");
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
      const auto& layer = trace.layers[l];
      if (layer.cols() != sums[l].size()) throw DimensionError("mean_coefficients: traces disagree on width");
      for (std::size_t r = 0; r < layer.rows(); ++r) {
        auto row = layer.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) sums[l][j] += row[j];
      }
    }
    if (!trace.layers.empty()) count += trace.layers.front().rows();
  }
  if (count == 0) throw UsageError("mean_coefficients: no coefficient rows");
  for (auto& layer : sums) {
    for (auto& v : layer) v /= static_cast<double>(count);
  }
  return sums;
}

template <typename T>
LayerVectors collect_mean_coefficients(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                                       std::span<const ProbeQuestion> questions, PositionSelector selector,
                                       std::size_t batch_size = 64) {
  if (questions.empty()) throw UsageError("collect_mean_coefficients: empty question list");
  std::vector<CoefficientTrace<T>> traces;
  for (std::size_t start = 0; start < questions.size(); start += batch_size) {
    const std::size_t stop = std::min(questions.size(), start + batch_size);
    PackedBatch batch;
    std::vector<std::size_t> rows;
    for (std::size_t i = start; i < stop; ++i) {
      auto [tokens, answer_positions] = qa_prompt(vocab, questions[i]);
      const std::size_t base = batch.tokens.size();
      for (std::size_t p : select_positions(selector, tokens.size(), answer_positions)) rows.push_back(base + p);
      batch.add(tokens);
    }
    ForwardOptions opts;
    opts.capture = true;
    auto result = forward(weights, batch, opts);
    traces.push_back(result.trace->select(rows));
  }
  return mean_coefficients(std::span<const CoefficientTrace<T>>(traces));
}

// ---------------------------------------------------------------- ranking and masks

// Indices ordered by descending |mean_j - mean_star_j|; ties go to the lower index.
inline std::vector<std::size_t> rank_by_difference(std::span<const double> mean, std::span<const double> mean_star) {
  if (mean.size() != mean_star.size()) {
    throw DimensionError("rank_vectors: coefficient vectors of length " + std::to_string(mean.size()) + " and " +
                         std::to_string(mean_star.size()));
  }
  std::vector<double> diff(mean.size());
  for (std::size_t j = 0; j < mean.size(); ++j) diff[j] = std::abs(mean[j] - mean_star[j]);
  std::vector<std::size_t> order(mean.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return diff[a] > diff[b]; });
  return order;
}

inline Ranking rank_vectors(const LayerVectors& mean, const LayerVectors& mean_star) {
  if (mean.size() != mean_star.size()) throw DimensionError("rank_vectors: layer counts differ");
  Ranking out;
  for (std::size_t l = 0; l < mean.size(); ++l) out.push_back(rank_by_difference(mean[l], mean_star[l]));
  return out;
}

// round(ratio * n) with halves rounded up, and at least one index for any positive ratio.
inline std::size_t mask_count(std::size_t n, double ratio) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw UsageError("mask ratio must lie in [0, 1]");
  if (ratio == 0.0 || n == 0) return 0;
  const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
  return std::clamp<std::size_t>(k, 1, n);
}

inline MaskSpec build_mask(const Ranking& ranking, double ratio, std::size_t skip_layers) {
  MaskSpec mask;
  mask.skip_layers = skip_layers;
  mask.layers.resize(ranking.size());
  for (std::size_t l = 0; l < ranking.size(); ++l) {
    const std::size_t k = mask_count(ranking[l].size(), ratio);
    if (l < skip_layers) continue;
    mask.layers[l].assign(ranking[l].begin(), ranking[l].begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(mask.layers[l].begin(), mask.layers[l].end());
  }
  return mask;
}

// ---------------------------------------------------------------- evaluation

enum class McqMode : std::uint8_t { kLoglik = 0, kGenerative = 1 };

inline McqMode parse_mcq_mode(std::string_view name) {
  if (name == "loglik") return McqMode::kLoglik;
  if (name == "generative") return McqMode::kGenerative;
  throw ConfigError("unknown MCQ mode '" + std::string(name) + "' (expected loglik or generative)");
}

inline std::string_view to_string(McqMode mode) { return mode == McqMode::kLoglik ? "loglik" : "generative"; }

struct McqOptions {
  McqMode mode = McqMode::kLoglik;
  std::vector<ProbeQuestion> shots;    // generative mode only
  std::size_t generation_budget = 30;  // generative mode: tokens searched for an option letter
  std::size_t batch_size = 64;
};

struct EvalResult {
  double accuracy = 0.0;
  std::vector<std::uint8_t> correct;
  std::vector<std::size_t> chosen;  // option index (MCQ); 4 when no letter was found
};

inline void require_four_options(std::span<const ProbeQuestion> questions) {
  for (const auto& q : questions) {
    if (q.options.size() != 4) {
      throw DataError("multiple-choice question has " + std::to_string(q.options.size()) + " options, expected 4");
    }
    if (q.gold_index >= q.options.size()) throw DataError("gold index outside options");
  }
}

inline double fraction_correct(const std::vector<std::uint8_t>& correct) {
  if (correct.empty()) return 0.0;
  return static_cast<double>(std::count(correct.begin(), correct.end(), std::uint8_t{1})) /
         static_cast<double>(correct.size());
}

// log p(option | answer prompt) for all four options of every question.
template <typename T>
std::vector<std::array<double, 4>> mcq_option_logliks(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                                                      std::span<const ProbeQuestion> questions,
                                                      const MaskSpec* mask = nullptr, std::size_t batch_size = 64) {
  require_four_options(questions);
  std::vector<std::array<double, 4>> out;
  out.reserve(questions.size());
  const bool single_token = std::all_of(questions.begin(), questions.end(), [](const ProbeQuestion& q) {
    return std::all_of(q.options.begin(), q.options.end(), [](const auto& o) { return o.size() == 1; });
  });
  for (std::size_t start = 0; start < questions.size(); start += batch_size) {
    const std::size_t stop = std::min(questions.size(), start + batch_size);
    if (single_token) {
      // One forward per prompt: every option's log-probability is read from
      // the final prompt position.
      PackedBatch batch;
      for (std::size_t i = start; i < stop; ++i) {
        const auto prompt = answer_prompt(vocab, questions[i]);
        if (prompt.size() + 1 > weights.config().max_seq) throw InputError("MCQ prompt exceeds max_seq");
        batch.add(prompt);
      }
      ForwardOptions opts;
      opts.mask = mask;
      const auto result = forward(weights, batch, opts);
      for (std::size_t i = start; i < stop; ++i) {
        const auto lsm = log_softmax_row(result.logits.row(batch.offsets[i - start + 1] - 1));
        std::array<double, 4> scores{};
        for (std::size_t o = 0; o < 4; ++o) scores[o] = lsm[static_cast<std::size_t>(questions[i].options[o][0])];
        out.push_back(scores);
      }
    } else {
      std::vector<ScoringItem> items;
      for (std::size_t i = start; i < stop; ++i) {
        const auto prompt = answer_prompt(vocab, questions[i]);
        for (const auto& o : questions[i].options) items.push_back({prompt, o});
      }
      const auto ll = sequence_logliks(weights, std::span<const ScoringItem>(items), mask);
      for (std::size_t i = 0; i < stop - start; ++i) out.push_back({ll[4 * i], ll[4 * i + 1], ll[4 * i + 2], ll[4 * i + 3]});
    }
  }
  return out;
}

template <typename T>
EvalResult evaluate_mcq(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                        std::span<const ProbeQuestion> questions, const MaskSpec* mask = nullptr,
                        const McqOptions& options = {}) {
  require_four_options(questions);
  EvalResult result;
  if (options.mode == McqMode::kLoglik) {
    for (const auto& scores : mcq_option_logliks(weights, vocab, questions, mask, options.batch_size)) {
      result.chosen.push_back(static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin()));
    }
  } else {
    std::array<TokenId, 4> letters{};
    for (std::size_t i = 0; i < 4; ++i) letters[i] = vocab.id(option_letters()[i]);
    for (std::size_t start = 0; start < questions.size(); start += options.batch_size) {
      const std::size_t stop = std::min(questions.size(), start + options.batch_size);
      std::vector<std::vector<TokenId>> prompts;
      for (std::size_t i = start; i < stop; ++i) {
        prompts.push_back(mcq_generative_prompt(vocab, options.shots, questions[i]));
      }
      GenerationRequest req;
      req.max_new = options.generation_budget;
      req.stop_token = Vocabulary::kEos;
      req.mask = mask;
      for (const auto& gen : generate_batch(weights, std::span<const std::vector<TokenId>>(prompts), req)) {
        std::size_t pick = 4;
        for (TokenId t : gen) {
          auto it = std::find(letters.begin(), letters.end(), t);
          if (it != letters.end()) {
            pick = static_cast<std::size_t>(it - letters.begin());
            break;
          }
        }
        result.chosen.push_back(pick);
      }
    }
  }
  for (std::size_t i = 0; i < questions.size(); ++i) {
    result.correct.push_back(result.chosen[i] == questions[i].gold_index ? 1 : 0);
  }
  result.accuracy = fraction_correct(result.correct);
  return result;
}

// Case-folded, punctuation stripped, whitespace collapsed.
inline std::string normalize_answer(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (std::ispunct(c)) continue;
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

// The normalized gold answer must occur in the normalized output on word boundaries.
inline bool oeg_match(std::string_view output, std::string_view gold) {
  const std::string g = normalize_answer(gold);
  const std::string o = normalize_answer(output);
  if (g.empty() || o.empty()) return false;
  return (" " + o + " ").find(" " + g + " ") != std::string::npos;
}

struct OegOptions {
  std::size_t token_budget = 24;
  std::size_t batch_size = 64;
};

template <typename T>
EvalResult evaluate_oeg(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                        std::span<const ProbeQuestion> questions, const MaskSpec* mask = nullptr,
                        const OegOptions& options = {}) {
  EvalResult result;
  for (std::size_t start = 0; start < questions.size(); start += options.batch_size) {
    const std::size_t stop = std::min(questions.size(), start + options.batch_size);
    std::vector<std::vector<TokenId>> prompts;
    for (std::size_t i = start; i < stop; ++i) prompts.push_back(answer_prompt(vocab, questions[i]));
    GenerationRequest req;
    req.max_new = options.token_budget;
    req.stop_token = Vocabulary::kEos;
    req.mask = mask;
    const auto gens = generate_batch(weights, std::span<const std::vector<TokenId>>(prompts), req);
    for (std::size_t i = start; i < stop; ++i) {
      const bool ok = oeg_match(vocab.detokenize(gens[i - start]), vocab.detokenize(questions[i].gold));
      result.correct.push_back(ok ? 1 : 0);
      result.chosen.push_back(ok ? 0 : 1);
    }
  }
  result.accuracy = fraction_correct(result.correct);
  return result;
}

// ---------------------------------------------------------------- surgery

struct SurgeryOptions {
  std::optional<std::size_t> skip_layers;  // defaults to default_skip_layers(n_layers)
  PositionSelector selector = PositionSelector::kAnswer;
  McqOptions mcq{};
  // Derive the mask from even-indexed questions and score on odd-indexed ones.
  bool held_out = false;
};

struct SurgeryReport {
  std::size_t concept_id = 0;
  double ratio = 0.0;
  double specific_after = 0.0;   // concept_id-specific score after surgery
  double general_after = 0.0;    // general score after surgery
  double general_before = 0.0;   // accuracy on related + irrelevant before surgery (PSS denominator)
  double specific_before = 0.0;
  double irrelevant_before = 0.0;
  double pss = 0.0;
  bool usable = false;           // false when general_before is zero and PSS is undefined
  std::size_t masked_per_layer = 0;

  double difference() const { return general_after - specific_after; }
};

// |general_after - specific_after| / base, or nullopt when base is not positive.
inline std::optional<double> pss_value(double general_after, double specific_after, double base) {
  if (!(base > 0.0)) return std::nullopt;
  return std::abs(general_after - specific_after) / base;
}

inline std::vector<ProbeQuestion> every_other(std::span<const ProbeQuestion> qs, std::size_t parity) {
  std::vector<ProbeQuestion> out;
  for (std::size_t i = parity; i < qs.size(); i += 2) out.push_back(qs[i]);
  return out;
}

// Ranking and unmasked scores for one probe set, reusable across mask ratios.
template <typename T>
class ConceptSurgery {
 public:
  ConceptSurgery(const TransformerWeights<T>& weights, const Vocabulary& vocab, const ConceptProbeSet& probes,
                 SurgeryOptions options = {})
      : weights_(&weights), vocab_(&vocab), concept_(probes.concept_id), options_(std::move(options)) {
    if (probes.related.empty() || probes.irrelevant.empty()) throw UsageError("surgery: probe set is empty");
    skip_layers_ = options_.skip_layers.value_or(default_skip_layers(weights.config().n_layers));
    std::vector<ProbeQuestion> rank_related = probes.related;
    std::vector<ProbeQuestion> rank_irrelevant = probes.irrelevant;
    related_ = probes.related;
    irrelevant_ = probes.irrelevant;
    if (options_.held_out) {
      rank_related = every_other(probes.related, 0);
      rank_irrelevant = every_other(probes.irrelevant, 0);
      related_ = every_other(probes.related, 1);
      irrelevant_ = every_other(probes.irrelevant, 1);
    }
    const auto mean = collect_mean_coefficients(weights, vocab, rank_related, options_.selector);
    const auto mean_star = collect_mean_coefficients(weights, vocab, rank_irrelevant, options_.selector);
    ranking_ = rank_vectors(mean, mean_star);

    const auto rel = evaluate_mcq(weights, vocab, related_, nullptr, options_.mcq);
    const auto irr = evaluate_mcq(weights, vocab, irrelevant_, nullptr, options_.mcq);
    specific_before_ = rel.accuracy;
    irrelevant_before_ = irr.accuracy;
    const double hits = rel.accuracy * static_cast<double>(related_.size()) +
                        irr.accuracy * static_cast<double>(irrelevant_.size());
    base_ = hits / static_cast<double>(related_.size() + irrelevant_.size());
  }

  const Ranking& ranking() const noexcept { return ranking_; }
  double base() const noexcept { return base_; }
  std::size_t skip_layers() const noexcept { return skip_layers_; }

  SurgeryReport at(double ratio) const {
    const MaskSpec mask = build_mask(ranking_, ratio, skip_layers_);
    SurgeryReport r;
    r.concept_id = concept_;
    r.ratio = ratio;
    r.general_before = base_;
    r.specific_before = specific_before_;
    r.irrelevant_before = irrelevant_before_;
    r.masked_per_layer = mask_count(weights_->config().d_mlp, ratio);
    if (mask.is_empty()) {
      r.specific_after = specific_before_;
      r.general_after = irrelevant_before_;
    } else {
      r.specific_after = evaluate_mcq(*weights_, *vocab_, related_, &mask, options_.mcq).accuracy;
      r.general_after = evaluate_mcq(*weights_, *vocab_, irrelevant_, &mask, options_.mcq).accuracy;
    }
    const auto pss = pss_value(r.general_after, r.specific_after, base_);
    r.usable = pss.has_value();
    r.pss = pss.value_or(0.0);
    return r;
  }

 private:
  const TransformerWeights<T>* weights_;
  const Vocabulary* vocab_;
  std::size_t concept_;
  SurgeryOptions options_;
  std::size_t skip_layers_ = 0;
  std::vector<ProbeQuestion> related_;
  std::vector<ProbeQuestion> irrelevant_;
  Ranking ranking_;
  double base_ = 0.0;
  double specific_before_ = 0.0;
  double irrelevant_before_ = 0.0;
};

template <typename T>
SurgeryReport run_surgery(const TransformerWeights<T>& weights, const Vocabulary& vocab, const ConceptProbeSet& probes,
                          double ratio, const SurgeryOptions& options = {}) {
  return ConceptSurgery<T>(weights, vocab, probes, options).at(ratio);
}

// ---------------------------------------------------------------- sweeps

inline const std::vector<double>& default_mask_ratios() {
  static const std::vector<double> ratios{0.10, 0.20, 0.30, 0.40, 0.50};
  return ratios;
}

struct ConceptPss {
  std::size_t concept_id = 0;
  double mean_pss = 0.0;
  bool usable = false;
};

struct CurvePoint {
  double ratio = 0.0;
  double mean_general = 0.0;
  double mean_specific = 0.0;
  double mean_difference = 0.0;  // general - specific
  std::size_t concepts = 0;
};

struct SweepResult {
  std::vector<SurgeryReport> reports;
  std::vector<ConceptPss> concepts;
  double aggregate = 0.0;
  std::vector<CurvePoint> curve;
};

// Per-concept mean PSS over ratios, the mean over usable concepts, and the
// mean General-Specific difference per ratio.
inline SweepResult summarize_sweep(std::vector<SurgeryReport> reports) {
  SweepResult out;
  std::map<std::size_t, std::vector<const SurgeryReport*>> by_concept;
  std::map<double, std::vector<const SurgeryReport*>> by_ratio;
  for (const auto& r : reports) by_concept[r.concept_id].push_back(&r);
  double total = 0.0;
  std::size_t usable = 0;
  for (const auto& [concept_id, rs] : by_concept) {
    ConceptPss c;
    c.concept_id = concept_id;
    c.usable = std::all_of(rs.begin(), rs.end(), [](const SurgeryReport* r) { return r->usable; });
    if (c.usable) {
      double s = 0.0;
      for (const auto* r : rs) s += r->pss;
      c.mean_pss = s / static_cast<double>(rs.size());
      total += c.mean_pss;
      ++usable;
      for (const auto* r : rs) by_ratio[r->ratio].push_back(r);
    }
    out.concepts.push_back(c);
  }
  if (usable == 0) throw SweepError("every concept_id in the sweep is unusable (zero accuracy before surgery)");
  out.aggregate = total / static_cast<double>(usable);
  for (const auto& [ratio, rs] : by_ratio) {
    CurvePoint p;
    p.ratio = ratio;
    for (const auto* r : rs) {
      p.mean_general += r->general_after;
      p.mean_specific += r->specific_after;
    }
    p.concepts = rs.size();
    p.mean_general /= static_cast<double>(rs.size());
    p.mean_specific /= static_cast<double>(rs.size());
    p.mean_difference = p.mean_general - p.mean_specific;
    out.curve.push_back(p);
  }
  out.reports = std::move(reports);
  return out;
}

template <typename T>
SweepResult pss_sweep(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                      std::span<const ConceptProbeSet> probe_sets, std::span<const double> ratios,
                      const SurgeryOptions& options = {}) {
  if (ratios.empty()) throw UsageError("pss_sweep: no mask ratios");
  if (probe_sets.empty()) throw UsageError("pss_sweep: no probe sets");
  std::vector<SurgeryReport> reports;
  for (const auto& ps : probe_sets) {
    ConceptSurgery<T> surgery(weights, vocab, ps, options);
    for (double k : ratios) reports.push_back(surgery.at(k));
  }
  return summarize_sweep(std::move(reports));
}

}  // namespace pslab
