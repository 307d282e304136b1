#pragma once

// Hallucination estimators: semantic entropy over clusters of sampled
// answers, and the maximum-likelihood Local Intrinsic Dimension of answer
// representations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pslab/corpus.hpp"
#include "pslab/error.hpp"
#include "pslab/model.hpp"
#include "pslab/stats.hpp"
#include "pslab/surgery.hpp"

namespace pslab {

struct AnswerSample {
  std::vector<TokenId> tokens;
  std::string text;  // normalized
  std::uint64_t seed = 0;
};

struct SamplingOptions {
  std::size_t n_samples = 10;
  double temperature = 1.0;
  std::uint64_t seed = 1;
  std::size_t token_budget = 24;
};

// Sample i uses the stream derive_seed(seed, i).
template <typename T>
std::vector<AnswerSample> sample_answers(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                                         const ProbeQuestion& question, const SamplingOptions& options = {}) {
  if (options.n_samples < 2) throw UsageError("sample_answers: need at least 2 samples");
  const auto prompt = answer_prompt(vocab, question);
  const std::vector<std::vector<TokenId>> prompts(options.n_samples, prompt);
  GenerationRequest req;
  req.max_new = options.token_budget;
  req.sampler.temperature = options.temperature;
  req.seed = options.seed;
  req.stop_token = Vocabulary::kEos;
  auto gens = generate_batch(weights, std::span<const std::vector<TokenId>>(prompts), req);
  std::vector<AnswerSample> out;
  for (std::size_t i = 0; i < gens.size(); ++i) {
    AnswerSample s;
    s.text = normalize_answer(vocab.detokenize(gens[i]));
    s.tokens = std::move(gens[i]);
    s.seed = derive_seed(options.seed, i);
    out.push_back(std::move(s));
  }
  return out;
}

struct Cluster {
  std::string text;
  std::size_t count = 0;
};

// Clusters by exact equality of normalized text, ordered by text.
inline std::vector<Cluster> cluster_answers(std::span<const std::string> normalized) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : normalized) ++counts[s];
  std::vector<Cluster> out;
  for (const auto& [text, count] : counts) out.push_back({text, count});
  return out;
}

// -(1/|C|) * sum_i log p(C_i), with p(C_i) the fraction of samples in cluster i.
inline double semantic_entropy(std::span<const std::string> normalized) {
  if (normalized.empty()) throw UsageError("semantic_entropy: no samples");
  const auto clusters = cluster_answers(normalized);
  const double total = static_cast<double>(normalized.size());
  double sum = 0.0;
  for (const auto& c : clusters) sum += std::log(static_cast<double>(c.count) / total);
  const double h = -sum / static_cast<double>(clusters.size());
  return h == 0.0 ? 0.0 : h;  // no negative zero
}

inline double semantic_entropy(std::span<const AnswerSample> samples) {
  std::vector<std::string> texts;
  for (const auto& s : samples) texts.push_back(s.text);
  return semantic_entropy(texts);
}

// ---------------------------------------------------------------- LID

struct LidPoint {
  std::optional<double> value;  // nullopt: every neighbour coincides with the point
  std::size_t skipped = 0;      // neighbours at distance zero that were left out
};

// MLE estimate ((1/(T-1)) * sum_{j<T} log(Q_T / Q_j))^-1 for row i of `cloud`,
// Q_j the ascending distances to the other rows. Neighbours with Q_j = 0 are
// dropped from the average.
template <typename T>
LidPoint lid_mle(const Tensor<T>& cloud, std::size_t i, std::size_t neighbours) {
  if (cloud.rank() != 2) throw DimensionError("lid_mle: point cloud must be a matrix");
  const std::size_t n = cloud.rows();
  if (i >= n) throw UsageError("lid_mle: point index out of range");
  if (neighbours < 2 || neighbours > n - 1) {
    throw UsageError("lid_mle: T must lie in [2, " + std::to_string(n == 0 ? 0 : n - 1) + "], got " +
                     std::to_string(neighbours));
  }
  std::vector<double> dist;
  dist.reserve(n - 1);
  const auto xi = cloud.row(i);
  for (std::size_t r = 0; r < n; ++r) {
    if (r == i) continue;
    const auto xr = cloud.row(r);
    double sq = 0.0;
    for (std::size_t k = 0; k < xi.size(); ++k) {
      const double d = static_cast<double>(xr[k]) - static_cast<double>(xi[k]);
      sq += d * d;
    }
    dist.push_back(std::sqrt(sq));
  }
  std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(neighbours), dist.end());
  LidPoint out;
  const double q_t = dist[neighbours - 1];
  if (!(q_t > 0.0)) {
    out.skipped = neighbours - 1;
    return out;
  }
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t j = 0; j + 1 < neighbours; ++j) {
    if (dist[j] == 0.0) {
      ++out.skipped;
      continue;
    }
    sum += std::log(q_t / dist[j]);
    ++used;
  }
  if (used == 0 || !(sum > 0.0)) return out;
  out.value = static_cast<double>(used) / sum;
  return out;
}

enum class LidAggregate : std::uint8_t { kMean = 0, kMedian = 1 };

inline LidAggregate parse_lid_aggregate(std::string_view name) {
  if (name == "mean") return LidAggregate::kMean;
  if (name == "median") return LidAggregate::kMedian;
  throw ConfigError("unknown LID aggregation '" + std::string(name) + "' (expected mean or median)");
}

struct LidSummary {
  double value = 0.0;
  std::size_t neighbours = 0;  // T actually used
  std::size_t excluded = 0;
  std::vector<LidPoint> points;
};

// Per-point estimates and their mean (or median) over non-excluded points.
// T is clipped to count - 1.
template <typename T>
LidSummary lid_summary(const Tensor<T>& cloud, std::size_t neighbours = 20,
                       LidAggregate aggregate = LidAggregate::kMean) {
  if (cloud.rank() != 2 || cloud.rows() < 3) throw UsageError("lid: point cloud needs at least 3 points");
  LidSummary s;
  s.neighbours = std::min(neighbours, cloud.rows() - 1);
  std::vector<double> values;
  for (std::size_t i = 0; i < cloud.rows(); ++i) {
    s.points.push_back(lid_mle(cloud, i, s.neighbours));
    if (s.points.back().value) {
      values.push_back(*s.points.back().value);
    } else {
      ++s.excluded;
    }
  }
  if (values.empty()) throw DataError("lid: every point was excluded (all neighbourhoods are duplicates)");
  s.value = aggregate == LidAggregate::kMean ? mean(values) : median(values);
  return s;
}

struct AnswerActivations {
  std::vector<std::vector<TokenId>> answers;  // greedy answers, one per question
  Tensor<double> cloud;                       // [questions x d_model]
};

// Final-layer residual state at the last token of each greedy answer (the last
// prompt token when the answer is empty).
template <typename T>
AnswerActivations answer_activations(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                                     std::span<const ProbeQuestion> questions, const MaskSpec* mask = nullptr,
                                     std::size_t token_budget = 24, std::size_t batch_size = 64) {
  AnswerActivations out;
  const std::size_t d = weights.config().d_model;
  out.cloud = Tensor<double>({questions.size(), d});
  for (std::size_t start = 0; start < questions.size(); start += batch_size) {
    const std::size_t stop = std::min(questions.size(), start + batch_size);
    std::vector<std::vector<TokenId>> prompts;
    for (std::size_t i = start; i < stop; ++i) prompts.push_back(answer_prompt(vocab, questions[i]));
    GenerationRequest req;
    req.max_new = token_budget;
    req.stop_token = Vocabulary::kEos;
    req.mask = mask;
    auto gens = generate_batch(weights, std::span<const std::vector<TokenId>>(prompts), req);
    PackedBatch batch;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      auto seq = prompts[i];
      seq.insert(seq.end(), gens[i].begin(), gens[i].end());
      batch.add(seq);
    }
    ForwardOptions opts;
    opts.mask = mask;
    opts.taps = true;
    const auto result = forward(weights, batch, opts);
    const Tensor<T>& last = result.taps->residual.back();
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      auto row = last.row(batch.offsets[i + 1] - 1);
      for (std::size_t k = 0; k < d; ++k) out.cloud(start + i, k) = static_cast<double>(row[k]);
      out.answers.push_back(std::move(gens[i]));
    }
  }
  return out;
}

template <typename T>
LidSummary lid_for_answers(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                           std::span<const ProbeQuestion> questions, std::size_t neighbours = 20,
                           LidAggregate aggregate = LidAggregate::kMean, const MaskSpec* mask = nullptr) {
  if (questions.size() < 3) throw UsageError("lid_for_answers: need at least 3 questions to form a point cloud");
  return lid_summary(answer_activations(weights, vocab, questions, mask).cloud, neighbours, aggregate);
}

}  // namespace pslab
