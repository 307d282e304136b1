#include <gtest/gtest.h>

#include <numeric>

#include "helpers.hpp"
#include "pslab/surgery.hpp"

namespace pslab {
namespace {

using testing::trained_small;

TEST(MaskCount, RoundsHalfUpWithFloorOfOne) {
  EXPECT_EQ(mask_count(10, 0.25), 3u);
  EXPECT_EQ(mask_count(10, 0.24), 2u);
  EXPECT_EQ(mask_count(512, 0.1), 51u);
  EXPECT_EQ(mask_count(512, 0.5), 256u);
  EXPECT_EQ(mask_count(4, 0.01), 1u);
  EXPECT_EQ(mask_count(64, 0.0), 0u);
  EXPECT_EQ(mask_count(64, 1.0), 64u);
  EXPECT_THROW(mask_count(64, 1.5), UsageError);
  EXPECT_THROW(mask_count(64, -0.1), UsageError);
}

TEST(Ranking, MatchesBruteForceSort) {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 40);
    std::vector<double> a(n), b(n);
    for (std::size_t j = 0; j < n; ++j) {
      // coarse values so ties are common
      a[j] = static_cast<double>(uniform_index(rng, 5));
      b[j] = static_cast<double>(uniform_index(rng, 5));
    }
    const auto order = rank_by_difference(a, b);
    // selection sort: largest |a-b|, lowest index first among equals
    std::vector<std::size_t> want;
    std::vector<bool> used(n, false);
    for (std::size_t step = 0; step < n; ++step) {
      std::size_t best = n;
      for (std::size_t j = 0; j < n; ++j) {
        if (used[j]) continue;
        if (best == n || std::abs(a[j] - b[j]) > std::abs(a[best] - b[best])) best = j;
      }
      used[best] = true;
      want.push_back(best);
    }
    EXPECT_EQ(order, want);
  }
  EXPECT_THROW(rank_by_difference(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), DimensionError);
}

TEST(Mask, TopEntriesAboveSkippedLayers) {
  const Ranking r{{3, 1, 0, 2}, {2, 0, 3, 1}, {1, 2, 3, 0}};
  const auto m = build_mask(r, 0.5, 1);
  EXPECT_TRUE(m.layers[0].empty());
  EXPECT_EQ(m.layers[1], (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(m.layers[2], (std::vector<std::size_t>{1, 2}));
  EXPECT_TRUE(build_mask(r, 0.0, 0).is_empty());
  const auto all = build_mask(r, 1.0, 0);
  EXPECT_EQ(all.masked_count(), 12u);
}

TEST(Pss, FormulaAndUndefinedBase) {
  EXPECT_DOUBLE_EQ(*pss_value(0.8, 0.2, 0.75), 0.8);
  EXPECT_DOUBLE_EQ(*pss_value(0.2, 0.8, 0.5), 1.2);
  EXPECT_FALSE(pss_value(0.5, 0.1, 0.0).has_value());
}

SurgeryReport report(std::size_t c, double ratio, double g, double s, double base) {
  SurgeryReport r;
  r.concept_id = c;
  r.ratio = ratio;
  r.general_after = g;
  r.specific_after = s;
  r.general_before = base;
  const auto p = pss_value(g, s, base);
  r.usable = p.has_value();
  r.pss = p.value_or(0.0);
  return r;
}

TEST(Sweep, AggregateIsMeanOfConceptMeans) {
  std::vector<SurgeryReport> rs{report(0, 0.1, 0.9, 0.5, 0.8), report(0, 0.5, 0.7, 0.1, 0.8),
                                report(1, 0.1, 0.6, 0.6, 0.5), report(1, 0.5, 0.5, 0.2, 0.5),
                                report(2, 0.1, 0.0, 0.0, 0.0), report(2, 0.5, 0.0, 0.0, 0.0)};
  const auto sw = summarize_sweep(rs);
  ASSERT_EQ(sw.concepts.size(), 3u);
  const double c0 = (0.4 / 0.8 + 0.6 / 0.8) / 2, c1 = (0.0 + 0.3 / 0.5) / 2;
  EXPECT_NEAR(sw.concepts[0].mean_pss, c0, 1e-12);
  EXPECT_NEAR(sw.concepts[1].mean_pss, c1, 1e-12);
  EXPECT_FALSE(sw.concepts[2].usable);
  EXPECT_NEAR(sw.aggregate, (c0 + c1) / 2, 1e-12);
  ASSERT_EQ(sw.curve.size(), 2u);
  EXPECT_NEAR(sw.curve[0].mean_difference, ((0.9 - 0.5) + 0.0) / 2, 1e-12);
  EXPECT_NEAR(sw.curve[1].mean_difference, ((0.7 - 0.1) + (0.5 - 0.2)) / 2, 1e-12);
  EXPECT_EQ(sw.curve[1].concepts, 2u);
}

TEST(Sweep, AllUnusableIsAnError) {
  EXPECT_THROW(summarize_sweep({report(0, 0.1, 0, 0, 0)}), SweepError);
}

TEST(Positions, Selectors) {
  const std::vector<std::size_t> ans{7, 8};
  EXPECT_EQ(select_positions(PositionSelector::kAnswer, 9, ans), ans);
  EXPECT_EQ(select_positions(PositionSelector::kAnswerPredicting, 9, ans), (std::vector<std::size_t>{6, 7}));
  EXPECT_EQ(select_positions(PositionSelector::kLast, 9, ans), (std::vector<std::size_t>{8}));
  EXPECT_EQ(select_positions(PositionSelector::kAll, 3, ans), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(parse_position_selector("middle"), ConfigError);
}

TEST(Coefficients, MeanMatchesDirectCapture) {
  const auto& f = trained_small();
  const auto qs = concept_probes(f.corpus, 0, 3);
  const auto got = collect_mean_coefficients(f.weights, f.corpus.vocab, qs, PositionSelector::kAnswer, 2);
  const std::size_t L = f.weights.config().n_layers, n = f.weights.config().d_mlp;
  std::vector<std::vector<double>> want(L, std::vector<double>(n, 0.0));
  std::size_t rows = 0;
  for (const auto& q : qs) {
    auto [toks, pos] = qa_prompt(f.corpus.vocab, q);
    ForwardOptions o;
    o.capture = true;
    const auto r = forward(f.weights, toks, o);
    for (std::size_t p : pos) {
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < n; ++j) want[l][j] += r.trace->layers[l](p, j);
      ++rows;
    }
  }
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(got[l][j], want[l][j] / double(rows), 1e-5);
}

TEST(Mcq, UntrainedModelIsAtChance) {
  std::vector<Corpus> corpora;
  for (std::uint64_t seed : {1, 2}) {
    CorpusConfig cc;
    cc.seed = seed;
    corpora.push_back(generate_corpus(cc));
  }
  std::size_t total = 0, hits = 0;
  for (const auto& c : corpora) {
    std::vector<ProbeQuestion> qs;
    for (std::size_t id : c.pretraining_concepts()) {
      auto more = concept_probes(c, id, 10);
      qs.insert(qs.end(), more.begin(), more.end());
    }
    auto cfg = testing::tiny_model(c.vocab.size(), 2, 32, 64, 2);
    const auto w = TransformerWeights<float>::initialized(cfg, 11);
    const auto res = evaluate_mcq(w, c.vocab, qs);
    total += qs.size();
    hits += static_cast<std::size_t>(std::count(res.correct.begin(), res.correct.end(), 1));
  }
  ASSERT_GE(total, 400u);
  const double acc = double(hits) / double(total);
  const double sigma = std::sqrt(0.25 * 0.75 / double(total));
  EXPECT_NEAR(acc, 0.25, 3.29 * sigma);
}

TEST(Mcq, RequiresFourOptions) {
  const auto& f = trained_small();
  auto qs = concept_probes(f.corpus, 0, 2);
  qs[1].options.pop_back();
  EXPECT_THROW(evaluate_mcq(f.weights, f.corpus.vocab, qs), DataError);
}

TEST(Mcq, TrainedModelBeatsChanceOnFrequentFacts) {
  const auto& f = trained_small();
  std::vector<ProbeQuestion> qs;
  for (std::size_t id : f.corpus.concepts_in_tier(Tier::kHigh)) {
    auto more = concept_probes(f.corpus, id, 10);
    qs.insert(qs.end(), more.begin(), more.end());
  }
  EXPECT_GT(evaluate_mcq(f.weights, f.corpus.vocab, qs).accuracy, 0.5);
}

TEST(Mcq, GenerativeModeReturnsAChoicePerQuestion) {
  const auto& f = trained_small();
  const auto qs = concept_probes(f.corpus, 1, 4);
  McqOptions o;
  o.mode = McqMode::kGenerative;
  o.generation_budget = 4;
  const auto r = evaluate_mcq(f.weights, f.corpus.vocab, qs, nullptr, o);
  EXPECT_EQ(r.chosen.size(), qs.size());
  for (auto c : r.chosen) EXPECT_LE(c, 4u);
}

TEST(Oeg, NormalizedContainment) {
  EXPECT_EQ(normalize_answer("  The  Red,  Fox! "), "the red fox");
  EXPECT_TRUE(oeg_match("it is red .", "red"));
  EXPECT_TRUE(oeg_match("RED", "red"));
  EXPECT_FALSE(oeg_match("reddish", "red"));
  EXPECT_FALSE(oeg_match("", "red"));
  EXPECT_TRUE(oeg_match("dark blue sky", "dark blue"));
}

TEST(Surgery, ZeroRatioChangesNothing) {
  const auto& f = trained_small();
  const auto ps = build_probe_set(f.corpus, 2, 1);
  const ConceptSurgery<float> s(f.weights, f.corpus.vocab, ps);
  const auto r = s.at(0.0);
  EXPECT_EQ(r.specific_after, r.specific_before);
  EXPECT_EQ(r.general_after, r.irrelevant_before);
  EXPECT_NEAR(r.general_before, (10 * r.specific_before + 50 * r.irrelevant_before) / 60, 1e-12);
}

TEST(Surgery, ReportsFollowTheMaskedModel) {
  const auto& f = trained_small();
  const auto ps = build_probe_set(f.corpus, 3, 1);
  const ConceptSurgery<float> s(f.weights, f.corpus.vocab, ps);
  const auto r = s.at(0.3);
  const auto mask = build_mask(s.ranking(), 0.3, s.skip_layers());
  EXPECT_EQ(s.skip_layers(), 1u);
  EXPECT_TRUE(mask.layers[0].empty());
  EXPECT_EQ(mask.layers[1].size(), mask_count(64, 0.3));
  EXPECT_EQ(r.specific_after, evaluate_mcq(f.weights, f.corpus.vocab, ps.related, &mask).accuracy);
  EXPECT_EQ(r.general_after, evaluate_mcq(f.weights, f.corpus.vocab, ps.irrelevant, &mask).accuracy);
  if (r.usable) {
    EXPECT_NEAR(r.pss, std::abs(r.general_after - r.specific_after) / r.general_before, 1e-12);
  }
}

TEST(Surgery, SweepHasOneReportPerRatio) {
  const auto& f = trained_small();
  const std::vector<ConceptProbeSet> sets{build_probe_set(f.corpus, 0, 1)};
  const auto sw = pss_sweep(f.weights, f.corpus.vocab, std::span<const ConceptProbeSet>(sets), default_mask_ratios());
  EXPECT_EQ(sw.reports.size(), default_mask_ratios().size());
  double mean = 0;
  for (const auto& r : sw.reports) mean += r.pss;
  EXPECT_NEAR(sw.aggregate, mean / double(sw.reports.size()), 1e-12);
}

TEST(Surgery, HeldOutSplitsQuestions) {
  const auto& f = trained_small();
  SurgeryOptions o;
  o.held_out = true;
  const auto r = run_surgery(f.weights, f.corpus.vocab, build_probe_set(f.corpus, 0, 1), 0.2, o);
  // 5 related + 25 irrelevant scored
  EXPECT_NEAR(r.specific_before * 5, std::round(r.specific_before * 5), 1e-9);
  EXPECT_NEAR(r.irrelevant_before * 25, std::round(r.irrelevant_before * 25), 1e-9);
}

TEST(Surgery, EmptyProbeSetIsRejected) {
  const auto& f = trained_small();
  ConceptProbeSet empty;
  EXPECT_THROW(ConceptSurgery<float>(f.weights, f.corpus.vocab, empty), UsageError);
}

}  // namespace
}  // namespace pslab
