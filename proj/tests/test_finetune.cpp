#include <gtest/gtest.h>

#include <numbers>

#include "helpers.hpp"
#include "pslab/finetune.hpp"

namespace pslab {
namespace {

using testing::trained_small;

TrainConfig short_run(std::size_t steps = 12) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.lr = 2e-3;
  t.seed = 3;
  t.decay = LrDecay::kCosine;
  t.weight_decay = 0.01;
  return t;
}

TEST(Schedule, WarmupThenCosineToFloor) {
  TrainConfig t;
  t.steps = 101;
  t.lr = 1.0;
  t.warmup_fraction = 0.05;  // ceil(5.05) = 6 warmup steps
  t.decay = LrDecay::kCosine;
  t.min_lr_fraction = 0.1;
  EXPECT_DOUBLE_EQ(learning_rate(t, 0), 1.0 / 6);
  EXPECT_DOUBLE_EQ(learning_rate(t, 5), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate(t, 6), 1.0);
  EXPECT_NEAR(learning_rate(t, 100), 0.1, 1e-12);
  const double mid = 6 + (100 - 6) / 2.0;
  EXPECT_NEAR(learning_rate(t, static_cast<std::size_t>(mid)), 0.1 + 0.45 * (1 + std::cos(std::numbers::pi * 0.5)), 1e-12);
  t.decay = LrDecay::kLinear;
  EXPECT_NEAR(learning_rate(t, 53), 0.1 + 0.9 * 0.5, 1e-12);
  t.decay = LrDecay::kConstant;
  EXPECT_DOUBLE_EQ(learning_rate(t, 80), 1.0);
  EXPECT_THROW(parse_lr_decay("step"), ConfigError);
}

TEST(Schedule, BadConfigIsRejected) {
  TrainConfig t;
  EXPECT_THROW(t.validate(), ConfigError);  // zero steps
  t.steps = 5;
  t.lr = 0;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(DataOrder, EachEpochIsAPermutation) {
  const std::size_t n = 13, b = 5;
  std::vector<std::size_t> stream;
  for (std::size_t step = 0; step < 13; ++step) {
    const auto idx = batch_indices(n, b, 7, step);
    ASSERT_EQ(idx.size(), b);
    stream.insert(stream.end(), idx.begin(), idx.end());
    EXPECT_EQ(idx, batch_indices(n, b, 7, step));
  }
  for (std::size_t e = 0; e < 5; ++e) {
    std::vector<std::size_t> epoch(stream.begin() + e * n, stream.begin() + (e + 1) * n);
    std::sort(epoch.begin(), epoch.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(epoch[i], i);
  }
  EXPECT_NE(batch_indices(n, b, 7, 0), batch_indices(n, b, 8, 0));
  EXPECT_THROW(batch_indices(0, b, 7, 0), DataError);
}

TEST(Training, LossFallsOnTheCorpus) {
  const auto c = generate_corpus(testing::small_corpus_config());
  auto cfg = testing::tiny_model(c.vocab.size(), 2, 32, 64, 2);
  auto w = TransformerWeights<float>::initialized(cfg, 1);
  const double before = evaluate_loss(w, std::span<const Sentence>(c.training).first(200));
  Trainer<float> tr(w, c.training, short_run(60));
  while (!tr.done()) tr.step_once();
  EXPECT_LT(evaluate_loss(w, std::span<const Sentence>(c.training).first(200)), before - 0.5);
  EXPECT_THROW(tr.step_once(), UsageError);
}

TEST(Training, SameSeedSameWeights) {
  const auto c = generate_corpus(testing::small_corpus_config());
  const auto cfg = testing::tiny_model(c.vocab.size());
  const auto a = pretrain<float>(cfg, c, short_run());
  const auto b = pretrain<float>(cfg, c, short_run());
  EXPECT_TRUE(a == b);
}

TEST(Training, ResumeEqualsUninterrupted) {
  const auto c = generate_corpus(testing::small_corpus_config());
  const auto cfg = testing::tiny_model(c.vocab.size());
  const auto full = pretrain<float>(cfg, c, short_run(20));

  auto w = TransformerWeights<float>::initialized(cfg, short_run().seed);
  std::string saved_weights, saved_state;
  {
    Trainer<float> tr(w, c.training, short_run(20));
    for (int i = 0; i < 9; ++i) tr.step_once();
    saved_weights = serialize_checkpoint(w);
    saved_state = serialize_train_state(tr.state(), w);
  }
  auto resumed = deserialize_checkpoint(saved_weights);
  auto state = deserialize_train_state(saved_state, resumed);
  EXPECT_EQ(state.step, 9u);
  Trainer<float> tr(resumed, c.training, short_run(20), std::nullopt, std::move(state));
  while (!tr.done()) tr.step_once();
  EXPECT_TRUE(resumed == full);
}

TEST(TrainState, CorruptFileIsRejected) {
  const auto w = testing::random_weights<float>(testing::tiny_model(12), 1);
  const auto bytes = serialize_train_state(TrainState<float>::zeros(w), w);
  EXPECT_THROW(deserialize_train_state(bytes.substr(1), w), FormatError);
  const auto other = testing::random_weights<float>(testing::tiny_model(12, 3), 1);
  EXPECT_THROW(deserialize_train_state(bytes, other), FormatError);
}

TEST(GradientMask, ShapeIsChecked) {
  const auto cfg = testing::tiny_model(12);
  GradientMask m = GradientMask::all(cfg);
  EXPECT_EQ(m.total_selected(), cfg.n_layers * cfg.d_mlp);
  m.value_rows[1].pop_back();
  EXPECT_THROW(m.validate(cfg), ConfigError);
}

// Every parameter outside the selected W_value rows must come back bit for bit.
void expect_only_selected_rows_moved(const TransformerWeights<float>& before, const TransformerWeights<float>& after,
                                     const GradientMask& mask) {
  const auto& cfg = before.config();
  std::vector<bool> is_value(before.parameters().size(), false);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) is_value[before.layer(l).w_value] = true;
  for (std::size_t p = 0; p < before.parameters().size(); ++p) {
    if (!is_value[p]) {
      EXPECT_EQ(before.at(p), after.at(p)) << before.parameters()[p].name;
    }
  }
  std::size_t moved = 0;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    for (std::size_t j = 0; j < cfg.d_mlp; ++j) {
      const auto a = before.w_value(l).row(j), b = after.w_value(l).row(j);
      const bool same = std::equal(a.begin(), a.end(), b.begin());
      if (!mask.value_rows[l][j]) {
        EXPECT_TRUE(same) << "layer " << l << " row " << j;
      }
      moved += same ? 0 : 1;
    }
  }
  EXPECT_GT(moved, 0u);
}

struct Selections {
  std::vector<ProbeQuestion> fresh, irrelevant;
};

Selections selection_questions(const Corpus& c) {
  Selections s;
  for (std::size_t id : c.concepts_in_tier(Tier::kNew)) {
    auto q = concept_probes(c, id, 10);
    s.fresh.insert(s.fresh.end(), q.begin(), q.end());
  }
  for (std::size_t id : c.pretraining_concepts()) {
    if (id % 3) continue;
    auto q = concept_probes(c, id, 10);
    s.irrelevant.insert(s.irrelevant.end(), q.begin(), q.end());
  }
  return s;
}

GradientMask select(FtVariant v, std::uint64_t seed = 1) {
  const auto& f = trained_small();
  const auto qs = selection_questions(f.corpus);
  FtSelection sel;
  sel.variant = v;
  sel.seed = seed;
  return select_ft_columns(f.weights, f.corpus.vocab, qs.fresh, qs.irrelevant, sel);
}

TEST(Variants, RowCounts) {
  const auto& f = trained_small();
  const std::size_t n = f.weights.config().d_mlp, per_layer = ft_row_count(n, 0.5);
  EXPECT_EQ(per_layer, 4u);  // round(0.5 * 64 / 8)
  const auto fv = select(FtVariant::kFull), pv = select(FtVariant::kPrecise), cv = select(FtVariant::kComplement),
             rv = select(FtVariant::kRandom);
  EXPECT_EQ(fv.total_selected(), 2 * n);
  EXPECT_EQ(pv.selected(0), 0u);
  EXPECT_EQ(pv.selected(1), per_layer);
  EXPECT_EQ(rv.selected(0), 0u);
  EXPECT_EQ(rv.selected(1), per_layer);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t j = 0; j < n; ++j) EXPECT_NE(pv.value_rows[l][j], cv.value_rows[l][j]);
  EXPECT_NE(select(FtVariant::kRandom, 1).value_rows, select(FtVariant::kRandom, 2).value_rows);
  EXPECT_EQ(select(FtVariant::kPrecise).value_rows, pv.value_rows);
}

TEST(Variants, ParseNames) {
  EXPECT_EQ(parse_ft_variant("FT-PV"), FtVariant::kPrecise);
  EXPECT_EQ(parse_ft_variant("cv"), FtVariant::kComplement);
  EXPECT_EQ(parse_ft_variant("random"), FtVariant::kRandom);
  try {
    parse_ft_variant("FT-XX");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("FT-XX"), std::string::npos);
  }
}

TEST(Finetune, FrozenParametersStayBitIdentical) {
  const auto& f = trained_small();
  for (auto v : {FtVariant::kPrecise, FtVariant::kComplement, FtVariant::kRandom}) {
    const auto mask = select(v);
    const auto tuned = finetune(f.weights, f.corpus.new_facts, mask, short_run(8));
    expect_only_selected_rows_moved(f.weights, tuned, mask);
  }
}

TEST(Finetune, FullVariantMovesOnlyValueVectors) {
  const auto& f = trained_small();
  const auto mask = select(FtVariant::kFull);
  const auto tuned = finetune(f.weights, f.corpus.new_facts, mask, short_run(5));
  expect_only_selected_rows_moved(f.weights, tuned, mask);
}

TEST(Finetune, EmptySelectionIsANoOp) {
  const auto& f = trained_small();
  const auto none = GradientMask::all(f.weights.config(), false);
  EXPECT_TRUE(finetune(f.weights, f.corpus.new_facts, none, short_run(3)) == f.weights);
}

TEST(Finetune, LearnsNewFacts) {
  const auto& f = trained_small();
  const double before = evaluate_loss(f.weights, std::span<const Sentence>(f.corpus.new_facts));
  auto t = short_run(80);
  t.weight_decay = 0;
  const auto tuned = finetune(f.weights, f.corpus.new_facts, select(FtVariant::kFull), t);
  EXPECT_LT(evaluate_loss(tuned, std::span<const Sentence>(f.corpus.new_facts)), before);
}

}  // namespace
}  // namespace pslab
