#include <gtest/gtest.h>

#include <map>
#include <set>

#include "helpers.hpp"
#include "pslab/corpus.hpp"

namespace pslab {
namespace {

const Corpus& default_corpus() {
  static const Corpus c = generate_corpus(CorpusConfig{});
  return c;
}

TEST(Corpus, SameSeedSameBytes) {
  EXPECT_EQ(corpus_jsonl(generate_corpus(CorpusConfig{})), corpus_jsonl(default_corpus()));
  CorpusConfig other;
  other.seed = 2;
  EXPECT_NE(corpus_jsonl(generate_corpus(other)), corpus_jsonl(default_corpus()));
}

TEST(Corpus, TiersSplitEvenly) {
  const auto& c = default_corpus();
  EXPECT_EQ(c.concepts_in_tier(Tier::kHigh).size(), 10u);
  EXPECT_EQ(c.concepts_in_tier(Tier::kMedium).size(), 10u);
  EXPECT_EQ(c.concepts_in_tier(Tier::kLow).size(), 10u);
  EXPECT_TRUE(c.concepts_in_tier(Tier::kNew).empty());
}

TEST(Corpus, EveryFactAppearsExactlyItsTierCount) {
  const auto& c = default_corpus();
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> seen;
  for (const auto& s : c.training) ++seen[{s.fact.concept_id, s.fact.attribute}];
  for (const auto& con : c.concepts) {
    const std::size_t want = c.config.repetitions[static_cast<std::size_t>(con.tier)];
    for (std::size_t a = 0; a < con.attributes.size(); ++a) EXPECT_EQ((seen[{con.id, a}]), want) << con.name;
  }
  EXPECT_EQ(c.training.size(), 10u * 10u * (64 + 16 + 4));
}

TEST(Corpus, FrequentFactsUseEveryTemplate) {
  const auto& c = default_corpus();
  std::map<std::pair<std::size_t, std::size_t>, std::set<std::size_t>> templates;
  for (const auto& s : c.training) templates[{s.fact.concept_id, s.fact.attribute}].insert(s.template_index);
  for (const auto& [fact, used] : templates) EXPECT_EQ(used.size(), kTemplateCount);
}

TEST(Corpus, AttributesAndDistractors) {
  const auto& c = default_corpus();
  for (const auto& con : c.concepts) {
    ASSERT_GE(con.attributes.size(), 10u);
    for (const auto& a : con.attributes) {
      std::set<std::string> opts{a.gold};
      for (const auto& d : a.distractors) opts.insert(d);
      EXPECT_EQ(opts.size(), 4u);
      const auto& pool = c.relations[a.relation].values;
      for (const auto& o : opts) EXPECT_NE(std::find(pool.begin(), pool.end(), o), pool.end());
    }
  }
}

TEST(Corpus, ConceptNamesAreDistinct) {
  std::set<std::string> names;
  for (const auto& con : default_corpus().concepts) names.insert(con.name);
  EXPECT_EQ(names.size(), default_corpus().concepts.size());
}

TEST(Corpus, NewConceptsStayOutOfPretraining) {
  const auto c = generate_corpus(testing::small_corpus_config());
  const auto fresh = c.concepts_in_tier(Tier::kNew);
  ASSERT_EQ(fresh.size(), 3u);
  for (const auto& s : c.training) EXPECT_EQ(std::count(fresh.begin(), fresh.end(), s.fact.concept_id), 0);
  EXPECT_EQ(c.new_facts.size(), 3u * 10u * c.config.new_repetitions);
  for (const auto& s : c.new_facts) EXPECT_EQ(std::count(fresh.begin(), fresh.end(), s.fact.concept_id), 1);
}

TEST(CorpusConfig, BadValuesAreRejected) {
  CorpusConfig ratios;
  ratios.tier_ratios = {0.5, 0.3, 0.3};
  EXPECT_THROW(generate_corpus(ratios), ConfigError);
  CorpusConfig reps;
  reps.repetitions = {16, 16, 4};
  EXPECT_THROW(generate_corpus(reps), ConfigError);
  CorpusConfig few;
  few.n_concepts = 12;
  EXPECT_THROW(generate_corpus(few), ConfigError);
  CorpusConfig names;
  names.syllable_pool = 3;
  EXPECT_THROW(generate_corpus(names), ConfigError);
}

TEST(Probes, SizesAndNoOverlap) {
  const auto& c = default_corpus();
  for (std::size_t id : c.pretraining_concepts()) {
    const auto set = build_probe_set(c, id, 3);
    EXPECT_EQ(set.related.size(), 10u);
    EXPECT_EQ(set.irrelevant.size(), 50u);
    std::set<std::string> golds;
    for (const auto& q : set.related) golds.insert(c.vocab.detokenize(q.gold));
    for (const auto& q : set.irrelevant) {
      EXPECT_NE(q.concept_id, id);
      EXPECT_FALSE(golds.contains(c.vocab.detokenize(q.gold)));
    }
    EXPECT_EQ(std::set<std::size_t>(set.irrelevant_concepts.begin(), set.irrelevant_concepts.end()).size(), 5u);
  }
}

TEST(Probes, DeterministicPerSeed) {
  const auto& c = default_corpus();
  EXPECT_EQ(build_probe_set(c, 4, 9).irrelevant_concepts, build_probe_set(c, 4, 9).irrelevant_concepts);
}

TEST(Probes, ExactlyOneOptionIsGold) {
  const auto& c = default_corpus();
  for (std::size_t id = 0; id < 5; ++id) {
    for (const auto& q : concept_probes(c, id, 10)) {
      ASSERT_EQ(q.options.size(), 4u);
      EXPECT_EQ(std::count(q.options.begin(), q.options.end(), q.gold), 1);
      EXPECT_EQ(q.options[q.gold_index], q.gold);
    }
  }
}

TEST(Probes, TooFewPartnersIsAnError) {
  ProbeSetOptions opts;
  opts.irrelevant_concepts = 100;
  EXPECT_THROW(build_probe_set(default_corpus(), 0, 1, opts), CorpusError);
  ProbeSetOptions many;
  many.related = 11;
  EXPECT_THROW(build_probe_set(default_corpus(), 0, 1, many), CorpusError);
}

TEST(Vocabulary, RoundTripsEverySentence) {
  const auto& c = default_corpus();
  for (std::size_t i = 0; i < c.training.size(); i += 37) {
    const auto& toks = c.training[i].tokens;
    const std::span<const TokenId> body(toks.data() + 1, toks.size() - 2);
    EXPECT_EQ(c.vocab.tokenize(c.vocab.detokenize(body)), std::vector<TokenId>(body.begin(), body.end()));
  }
  EXPECT_TRUE(c.vocab.tokenize("").empty());
}

TEST(Vocabulary, UnknownWordIsNamed) {
  try {
    default_corpus().vocab.tokenize("the zzqx");
    FAIL();
  } catch (const TokenizerError& e) {
    EXPECT_NE(std::string(e.what()).find("zzqx"), std::string::npos);
  }
}

TEST(Vocabulary, SpecialsComeFirst) {
  const auto& v = default_corpus().vocab;
  EXPECT_EQ(v.id("<pad>"), 0);
  EXPECT_EQ(v.id("<bos>"), 1);
  EXPECT_EQ(v.id("<eos>"), 2);
  EXPECT_THROW(v.word(static_cast<TokenId>(v.size())), InputError);
}

TEST(TokenStream, RoundTripAndCorruption) {
  const auto& c = default_corpus();
  const auto stream = c.training_stream();
  const auto bytes = serialize_token_stream(stream, c.vocab.size());
  std::size_t vs = 0;
  EXPECT_EQ(deserialize_token_stream(bytes, &vs), stream);
  EXPECT_EQ(vs, c.vocab.size());
  EXPECT_EQ(bytes.size(), 8u + 4 + 4 + 8 + 4 * stream.size());
  EXPECT_THROW(deserialize_token_stream("NOTATOKENSTREAM!"), FormatError);
  EXPECT_THROW(deserialize_token_stream(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(deserialize_token_stream(serialize_token_stream(std::vector<TokenId>{5}, 3)), FormatError);
}

TEST(CorpusFiles, WrittenToMissingDirectory) {
  const auto dir = testing::scratch_dir("corpus_files") / "a" / "b";
  const auto c = generate_corpus(testing::small_corpus_config());
  write_corpus_files(c, dir);
  for (const char* f : {"corpus.jsonl", "vocab.txt", "train.tok", "train.txt", "new_facts.tok", "new_facts.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_EQ(deserialize_token_stream(io::read_file(dir / "train.tok")), c.training_stream());
  const auto jsonl = io::read_file(dir / "corpus.jsonl");
  std::istringstream lines(jsonl);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    EXPECT_TRUE(nlohmann::json::accept(line));
    ++n;
  }
  EXPECT_GT(n, c.concepts.size());
}

}  // namespace
}  // namespace pslab
