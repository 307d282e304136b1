#pragma once

// Seeded synthetic fact corpus. Concepts carry one attribute per relation;
// every fact is rendered into the training stream a tier-dependent number of
// times through a fixed set of paraphrase templates. Probes (multiple choice
// and open-ended) are rendered from the same facts.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "pslab/checkpoint.hpp"
#include "pslab/error.hpp"
#include "pslab/model.hpp"
#include "pslab/random.hpp"

namespace pslab {

// ---------------------------------------------------------------- vocabulary

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>"}) add(s);
  }

  static constexpr std::size_t special_count() { return 3; }

  TokenId add(const std::string& word) {
    if (auto it = ids_.find(word); it != ids_.end()) return it->second;
    const auto id = static_cast<TokenId>(words_.size());
    words_.push_back(word);
    ids_.emplace(word, id);
    return id;
  }

  bool contains(const std::string& word) const { return ids_.contains(word); }

  TokenId id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end()) throw TokenizerError(word);
    return it->second;
  }

  const std::string& word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
      throw InputError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return words_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

// ---------------------------------------------------------------- domain types

enum class Tier : std::uint8_t { kHigh = 0, kMedium = 1, kLow = 2, kNew = 3 };

inline std::string_view to_string(Tier tier) {
  switch (tier) {
    case Tier::kHigh: return "high";
    case Tier::kMedium: return "medium";
    case Tier::kLow: return "low";
    case Tier::kNew: return "new";
  }
  return "unknown";
}

struct Relation {
  std::string name;
  std::string phrase;
  std::vector<std::string> values;
};

struct Attribute {
  std::size_t relation = 0;
  std::string gold;
  std::array<std::string, 3> distractors;
};

struct Concept {
  std::size_t id = 0;
  std::string name;
  Tier tier = Tier::kHigh;
  std::vector<Attribute> attributes;
};

struct FactRef {
  std::size_t concept_id = 0;
  std::size_t attribute = 0;
  friend bool operator==(const FactRef&, const FactRef&) = default;
};

struct Sentence {
  std::vector<TokenId> tokens;  // <bos> words... <eos>
  FactRef fact;
  std::size_t template_index = 0;
};

struct CorpusConfig {
  std::uint64_t seed = 1;
  std::size_t n_concepts = 30;
  std::array<double, 3> tier_ratios{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  std::array<std::size_t, 3> repetitions{64, 16, 4};
  std::size_t n_relations = 10;
  // Concepts held out of the pretraining stream; their facts form the
  // fine-tuning text.
  std::size_t n_new_concepts = 0;
  std::size_t new_repetitions = 16;
  // Concept names are name_syllables tokens drawn from a shared pool of
  // syllable_pool syllables, so no single token identifies a concept.
  std::size_t name_syllables = 2;
  std::size_t syllable_pool = 12;

  void validate() const {
    if (n_concepts < 18) throw ConfigError("corpus.n_concepts must be at least 18 (six per tier)");
    double total = 0.0;
    for (double r : tier_ratios) {
      if (r < 0.0) throw ConfigError("corpus.tier_ratios must be non-negative");
      total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("corpus.tier_ratios must sum to 1");
    if (!(repetitions[0] > repetitions[1] && repetitions[1] > repetitions[2] && repetitions[2] > 0)) {
      throw ConfigError("corpus.repetitions must be strictly decreasing high > medium > low > 0");
    }
    if (n_relations < 1) throw ConfigError("corpus.n_relations must be positive");
    if (n_new_concepts > 0 && new_repetitions == 0) throw ConfigError("corpus.new_repetitions must be positive");
    if (name_syllables < 1 || syllable_pool < 1) throw ConfigError("corpus.name_syllables and syllable_pool must be positive");
    double combos = 1.0;
    for (std::size_t i = 0; i < name_syllables; ++i) combos *= static_cast<double>(syllable_pool);
    if (combos < 2.0 * static_cast<double>(n_concepts + n_new_concepts)) {
      throw ConfigError("corpus.syllable_pool^name_syllables must be at least twice the number of concepts");
    }
  }
};

// ---------------------------------------------------------------- rendering

inline constexpr std::size_t kTemplateCount = 4;

inline std::string question_text(const Relation& rel, const std::string& name) {
  return "question : what is the " + rel.phrase + " of " + name + " ?";
}

inline std::string render_fact(const Relation& rel, const std::string& name, const std::string& value,
                               std::size_t template_index) {
  switch (template_index % kTemplateCount) {
    case 0: return "the " + rel.phrase + " of " + name + " is " + value + " .";
    case 1: return name + " 's " + rel.phrase + " is " + value + " .";
    case 2: return value + " is the " + rel.phrase + " of " + name + " .";
    default: return question_text(rel, name) + " answer : " + value;
  }
}

namespace detail {

struct RelationSeed {
  const char* name;
  const char* phrase;
  std::array<const char*, 20> values;
};

inline const std::vector<RelationSeed>& relation_seeds() {
  static const std::vector<RelationSeed> seeds = {
      {"color", "favorite color",
       {"red", "blue", "green", "yellow", "purple", "orange", "white", "black", "pink", "brown", "gray", "gold",
        "silver", "violet", "teal", "crimson", "amber", "indigo", "ivory", "maroon"}},
      {"city", "home city",
       {"paris", "london", "tokyo", "cairo", "lima", "oslo", "rome", "berlin", "madrid", "dublin", "vienna", "prague",
        "athens", "lisbon", "seoul", "delhi", "sydney", "toronto", "nairobi", "havana"}},
      {"pet", "pet",
       {"cat", "dog", "horse", "rabbit", "parrot", "turtle", "goat", "ferret", "hamster", "lizard", "owl", "pony",
        "duck", "goose", "frog", "snake", "mouse", "pig", "lamb", "crow"}},
      {"food", "favorite food",
       {"bread", "rice", "soup", "cheese", "pasta", "salad", "curry", "pizza", "noodles", "beans", "tacos", "sushi",
        "steak", "fish", "eggs", "pie", "cake", "honey", "olives", "dumplings"}},
      {"instrument", "instrument",
       {"piano", "violin", "guitar", "flute", "drum", "cello", "harp", "trumpet", "oboe", "banjo", "organ", "tuba",
        "clarinet", "lute", "sitar", "bagpipe", "accordion", "ukulele", "saxophone", "xylophone"}},
      {"sport", "sport",
       {"tennis", "soccer", "rugby", "hockey", "golf", "boxing", "rowing", "cricket", "chess", "skiing", "judo",
        "karate", "fencing", "archery", "cycling", "sailing", "surfing", "climbing", "polo", "bowling"}},
      {"profession", "profession",
       {"baker", "farmer", "doctor", "teacher", "pilot", "sailor", "painter", "lawyer", "nurse", "miner", "tailor",
        "potter", "singer", "writer", "chef", "judge", "banker", "weaver", "builder", "dancer"}},
      {"metal", "metal",
       {"iron", "copper", "tin", "zinc", "lead", "nickel", "cobalt", "chrome", "bronze", "brass", "steel",
        "platinum", "titanium", "mercury", "tungsten", "lithium", "sodium", "cadmium", "bismuth", "uranium"}},
      {"language", "language",
       {"french", "german", "spanish", "italian", "dutch", "greek", "polish", "czech", "swedish", "finnish", "hindi",
        "arabic", "latin", "turkish", "korean", "thai", "welsh", "irish", "danish", "hebrew"}},
      {"number", "lucky number",
       {"one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve", "thirteen",
        "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty"}},
      {"flower", "flower",
       {"rose", "tulip", "lily", "daisy", "orchid", "lotus", "iris", "poppy", "sunflower", "jasmine", "peony", "aster",
        "dahlia", "lilac", "magnolia", "camellia", "begonia", "azalea", "freesia", "zinnia"}},
      {"tree", "tree",
       {"oak", "pine", "maple", "birch", "cedar", "willow", "elm", "ash", "beech", "spruce", "cypress", "palm",
        "poplar", "alder", "larch", "yew", "hazel", "fir", "linden", "acacia"}},
  };
  return seeds;
}

inline const std::vector<std::string>& structural_words() {
  static const std::vector<std::string> words = {"the", "of", "is", "'s", ".", "question", ":", "what", "?",
                                                 "answer", "options", "A", "B", "C", "D"};
  return words;
}

// Consonant-vowel syllables not clashing with `reserved`, in seeded order.
inline std::vector<std::string> syllable_pool(Rng& rng, std::size_t size, const std::set<std::string>& reserved) {
  static constexpr std::string_view onsets = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  std::vector<std::string> all;
  for (char o : onsets) {
    for (char v : vowels) {
      std::string s{o, v};
      if (!reserved.contains(s)) all.push_back(s);
    }
  }
  if (size > all.size()) throw ConfigError("corpus.syllable_pool may not exceed " + std::to_string(all.size()));
  shuffle(all.begin(), all.end(), rng);
  all.resize(size);
  return all;
}

inline std::string make_name(Rng& rng, const std::vector<std::string>& pool, std::size_t syllables) {
  std::string name;
  for (std::size_t s = 0; s < syllables; ++s) {
    if (s > 0) name += ' ';
    name += pool[uniform_index(rng, pool.size())];
  }
  return name;
}

}  // namespace detail

// ---------------------------------------------------------------- corpus

struct Corpus {
  CorpusConfig config;
  std::vector<Relation> relations;
  std::vector<Concept> concepts;
  Vocabulary vocab;
  std::vector<Sentence> training;
  std::vector<Sentence> new_facts;

  const Concept& concept_at(std::size_t id) const { return concepts.at(id); }

  std::vector<std::size_t> concepts_in_tier(Tier tier) const {
    std::vector<std::size_t> ids;
    for (const auto& c : concepts) {
      if (c.tier == tier) ids.push_back(c.id);
    }
    return ids;
  }

  std::vector<std::size_t> pretraining_concepts() const {
    std::vector<std::size_t> ids;
    for (const auto& c : concepts) {
      if (c.tier != Tier::kNew) ids.push_back(c.id);
    }
    return ids;
  }

  bool share_values(std::size_t a, std::size_t b) const {
    std::set<std::string> va;
    for (const auto& attr : concepts.at(a).attributes) va.insert(attr.gold);
    for (const auto& attr : concepts.at(b).attributes) {
      if (va.contains(attr.gold)) return true;
    }
    return false;
  }

  std::vector<std::size_t> no_overlap_partners(std::size_t id) const {
    std::vector<std::size_t> out;
    for (std::size_t other : pretraining_concepts()) {
      if (other != id && !share_values(id, other)) out.push_back(other);
    }
    return out;
  }

  std::vector<TokenId> training_stream() const {
    std::vector<TokenId> out;
    for (const auto& s : training) out.insert(out.end(), s.tokens.begin(), s.tokens.end());
    return out;
  }

  std::size_t fact_occurrences(FactRef fact) const {
    return static_cast<std::size_t>(
        std::count_if(training.begin(), training.end(), [&](const Sentence& s) { return s.fact == fact; }));
  }
};

inline Sentence make_sentence(const Corpus& corpus, FactRef fact, std::size_t template_index) {
  const Concept& c = corpus.concepts[fact.concept_id];
  const Attribute& a = c.attributes[fact.attribute];
  Sentence s;
  s.fact = fact;
  s.template_index = template_index % kTemplateCount;
  s.tokens.push_back(Vocabulary::kBos);
  for (TokenId t : corpus.vocab.tokenize(render_fact(corpus.relations[a.relation], c.name, a.gold, template_index))) {
    s.tokens.push_back(t);
  }
  s.tokens.push_back(Vocabulary::kEos);
  return s;
}

inline Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  const auto& seeds = detail::relation_seeds();
  if (config.n_relations > seeds.size()) {
    throw ConfigError("corpus.n_relations may not exceed " + std::to_string(seeds.size()));
  }
  Corpus corpus;
  corpus.config = config;
  for (std::size_t r = 0; r < config.n_relations; ++r) {
    Relation rel{seeds[r].name, seeds[r].phrase, {}};
    for (const char* v : seeds[r].values) rel.values.emplace_back(v);
    corpus.relations.push_back(std::move(rel));
  }

  std::set<std::string> reserved(detail::structural_words().begin(), detail::structural_words().end());
  for (const auto& rel : corpus.relations) {
    for (const auto& w : split_words(rel.phrase)) reserved.insert(w);
    for (const auto& v : rel.values) reserved.insert(v);
  }

  Rng rng = make_rng(config.seed, 0xC0);
  const std::size_t total = config.n_concepts + config.n_new_concepts;
  const auto pool = detail::syllable_pool(rng, config.syllable_pool, reserved);
  std::set<std::string> names;
  while (names.size() < total) names.insert(detail::make_name(rng, pool, config.name_syllables));
  std::vector<std::string> ordered_names(names.begin(), names.end());
  shuffle(ordered_names.begin(), ordered_names.end(), rng);

  const auto n_high = static_cast<std::size_t>(std::llround(config.tier_ratios[0] * config.n_concepts));
  const auto n_medium = static_cast<std::size_t>(std::llround(config.tier_ratios[1] * config.n_concepts));
  if (n_high + n_medium > config.n_concepts) throw ConfigError("corpus.tier_ratios round past n_concepts");
  for (std::size_t i = 0; i < total; ++i) {
    Concept c;
    c.id = i;
    c.name = ordered_names[i];
    if (i >= config.n_concepts) {
      c.tier = Tier::kNew;
    } else if (i < n_high) {
      c.tier = Tier::kHigh;
    } else if (i < n_high + n_medium) {
      c.tier = Tier::kMedium;
    } else {
      c.tier = Tier::kLow;
    }
    corpus.concepts.push_back(std::move(c));
  }

  // Attribute draws are repeated until every concept has at least five
  // pretraining concepts sharing none of its values.
  constexpr std::size_t kMinPartners = 5;
  for (int attempt = 0;; ++attempt) {
    for (auto& c : corpus.concepts) {
      c.attributes.clear();
      for (std::size_t r = 0; r < corpus.relations.size(); ++r) {
        const auto& pool = corpus.relations[r].values;
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        shuffle(idx.begin(), idx.end(), rng);
        Attribute a;
        a.relation = r;
        a.gold = pool[idx[0]];
        for (std::size_t d = 0; d < 3; ++d) a.distractors[d] = pool[idx[d + 1]];
        c.attributes.push_back(std::move(a));
      }
    }
    bool ok = true;
    for (const auto& c : corpus.concepts) ok = ok && corpus.no_overlap_partners(c.id).size() >= kMinPartners;
    if (ok) break;
    if (attempt > 200) throw CorpusError("could not draw attributes with enough non-overlapping concepts");
  }

  for (const auto& w : detail::structural_words()) corpus.vocab.add(w);
  for (const auto& rel : corpus.relations) {
    for (const auto& w : split_words(rel.phrase)) corpus.vocab.add(w);
  }
  for (const auto& rel : corpus.relations) {
    for (const auto& v : rel.values) corpus.vocab.add(v);
  }
  for (const auto& c : corpus.concepts) {
    for (const auto& w : split_words(c.name)) corpus.vocab.add(w);
  }

  for (const auto& c : corpus.concepts) {
    const std::size_t reps =
        c.tier == Tier::kNew ? config.new_repetitions : config.repetitions[static_cast<std::size_t>(c.tier)];
    auto& target = c.tier == Tier::kNew ? corpus.new_facts : corpus.training;
    for (std::size_t a = 0; a < c.attributes.size(); ++a) {
      for (std::size_t rep = 0; rep < reps; ++rep) target.push_back(make_sentence(corpus, {c.id, a}, rep));
    }
  }
  Rng order = make_rng(config.seed, 0x5E);
  shuffle(corpus.training.begin(), corpus.training.end(), order);
  shuffle(corpus.new_facts.begin(), corpus.new_facts.end(), order);
  return corpus;
}

// ---------------------------------------------------------------- probes

enum class ProbeKind : std::uint8_t { kMcq = 0, kOeg = 1 };

struct ProbeQuestion {
  std::size_t concept_id = 0;
  std::size_t relation = 0;
  ProbeKind kind = ProbeKind::kMcq;
  std::vector<TokenId> question;  // "question : what is the ... ?"
  std::vector<std::vector<TokenId>> options;
  std::size_t gold_index = 0;
  std::vector<TokenId> gold;
};

struct ConceptProbeSet {
  std::size_t concept_id = 0;
  std::vector<ProbeQuestion> related;
  std::vector<ProbeQuestion> irrelevant;
  std::vector<std::size_t> irrelevant_concepts;

  std::vector<ProbeQuestion> all() const {
    std::vector<ProbeQuestion> out = related;
    out.insert(out.end(), irrelevant.begin(), irrelevant.end());
    return out;
  }
};

// Option order is a deterministic function of (corpus seed, concept, attribute).
inline ProbeQuestion make_probe(const Corpus& corpus, std::size_t concept_id, std::size_t attribute,
                                ProbeKind kind = ProbeKind::kMcq) {
  const Concept& c = corpus.concept_at(concept_id);
  const Attribute& a = c.attributes.at(attribute);
  const Relation& rel = corpus.relations[a.relation];
  ProbeQuestion q;
  q.concept_id = concept_id;
  q.relation = a.relation;
  q.kind = kind;
  q.question = corpus.vocab.tokenize(question_text(rel, c.name));
  q.gold = corpus.vocab.tokenize(a.gold);
  Rng rng = make_rng(corpus.config.seed, 0x9000 + concept_id * 64 + attribute);
  q.gold_index = uniform_index(rng, 4);
  std::size_t d = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    q.options.push_back(i == q.gold_index ? q.gold : corpus.vocab.tokenize(a.distractors[d++]));
  }
  return q;
}

inline std::vector<ProbeQuestion> concept_probes(const Corpus& corpus, std::size_t concept_id, std::size_t t,
                                                 ProbeKind kind = ProbeKind::kMcq) {
  const Concept& c = corpus.concept_at(concept_id);
  if (c.attributes.size() < t) {
    throw CorpusError("concept " + c.name + " has fewer than " + std::to_string(t) + " attributes");
  }
  std::vector<ProbeQuestion> out;
  for (std::size_t a = 0; a < t; ++a) out.push_back(make_probe(corpus, concept_id, a, kind));
  return out;
}

struct ProbeSetOptions {
  std::size_t related = 10;             // t
  std::size_t irrelevant_concepts = 5;  // t* = irrelevant_concepts * related
  ProbeKind kind = ProbeKind::kMcq;
};

inline ConceptProbeSet build_probe_set(const Corpus& corpus, std::size_t concept_id, std::uint64_t seed,
                                       const ProbeSetOptions& options = {}) {
  ConceptProbeSet set;
  set.concept_id = concept_id;
  set.related = concept_probes(corpus, concept_id, options.related, options.kind);
  auto partners = corpus.no_overlap_partners(concept_id);
  if (partners.size() < options.irrelevant_concepts) {
    throw CorpusError("concept " + corpus.concept_at(concept_id).name + " has only " + std::to_string(partners.size()) +
                      " concepts without knowledge overlap, need " + std::to_string(options.irrelevant_concepts));
  }
  Rng rng = make_rng(seed, 0x1A00 + concept_id);
  shuffle(partners.begin(), partners.end(), rng);
  partners.resize(options.irrelevant_concepts);
  set.irrelevant_concepts = partners;
  for (std::size_t other : partners) {
    auto qs = concept_probes(corpus, other, options.related, options.kind);
    set.irrelevant.insert(set.irrelevant.end(), qs.begin(), qs.end());
  }
  return set;
}

// ---------------------------------------------------------------- prompts

// "<bos> question : ... ? answer :" — the shared prefix for scoring and open-ended generation.
inline std::vector<TokenId> answer_prompt(const Vocabulary& vocab, const ProbeQuestion& q) {
  std::vector<TokenId> out{Vocabulary::kBos};
  out.insert(out.end(), q.question.begin(), q.question.end());
  out.push_back(vocab.id("answer"));
  out.push_back(vocab.id(":"));
  return out;
}

// Q/A prompt with the gold answer appended; returns the prompt and the
// positions of the answer tokens within it.
inline std::pair<std::vector<TokenId>, std::vector<std::size_t>> qa_prompt(const Vocabulary& vocab,
                                                                           const ProbeQuestion& q) {
  auto tokens = answer_prompt(vocab, q);
  std::vector<std::size_t> answer_positions;
  for (TokenId t : q.gold) {
    answer_positions.push_back(tokens.size());
    tokens.push_back(t);
  }
  return {std::move(tokens), std::move(answer_positions)};
}

inline const std::array<std::string, 4>& option_letters() {
  static const std::array<std::string, 4> letters{"A", "B", "C", "D"};
  return letters;
}

inline void append_mcq_block(const Vocabulary& vocab, const ProbeQuestion& q, std::vector<TokenId>& out) {
  out.insert(out.end(), q.question.begin(), q.question.end());
  out.push_back(vocab.id("options"));
  out.push_back(vocab.id(":"));
  for (std::size_t i = 0; i < q.options.size(); ++i) {
    out.push_back(vocab.id(option_letters()[i]));
    out.insert(out.end(), q.options[i].begin(), q.options[i].end());
  }
  out.push_back(vocab.id("answer"));
  out.push_back(vocab.id(":"));
}

// Few-shot multiple-choice prompt: each shot is a solved question followed by
// its option letter, then the target question awaiting a letter.
inline std::vector<TokenId> mcq_generative_prompt(const Vocabulary& vocab, std::span<const ProbeQuestion> shots,
                                                  const ProbeQuestion& q) {
  std::vector<TokenId> out{Vocabulary::kBos};
  for (const auto& s : shots) {
    append_mcq_block(vocab, s, out);
    out.push_back(vocab.id(option_letters()[s.gold_index]));
  }
  append_mcq_block(vocab, q, out);
  return out;
}

// ---------------------------------------------------------------- files

inline constexpr std::string_view kTokenStreamMagic = "PSLABTOK";
inline constexpr std::uint32_t kTokenStreamVersion = 1;

// Token stream layout (little-endian): magic "PSLABTOK", u32 version,
// u32 vocab size, u64 token count, then i32 token ids.
inline std::string serialize_token_stream(std::span<const TokenId> tokens, std::size_t vocab_size) {
  std::string out(kTokenStreamMagic);
  io::put<std::uint32_t>(out, kTokenStreamVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(vocab_size));
  io::put<std::uint64_t>(out, tokens.size());
  for (TokenId t : tokens) io::put<std::int32_t>(out, t);
  return out;
}

inline std::vector<TokenId> deserialize_token_stream(std::string_view bytes, std::size_t* vocab_size = nullptr) {
  io::Reader in(bytes);
  if (in.take(kTokenStreamMagic.size()) != kTokenStreamMagic) throw FormatError("not a token stream (bad magic)");
  if (in.get<std::uint32_t>() != kTokenStreamVersion) throw FormatError("unsupported token stream version");
  const auto vs = in.get<std::uint32_t>();
  if (vocab_size != nullptr) *vocab_size = vs;
  const auto n = in.get<std::uint64_t>();
  std::vector<TokenId> tokens(n);
  for (auto& t : tokens) {
    t = in.get<std::int32_t>();
    if (t < 0 || static_cast<std::uint32_t>(t) >= vs) throw FormatError("token id outside vocabulary");
  }
  if (!in.at_end()) throw FormatError("trailing bytes after token stream");
  return tokens;
}

inline nlohmann::json probe_record(const Corpus& corpus, const ProbeQuestion& q) {
  nlohmann::json options = nlohmann::json::array();
  for (const auto& o : q.options) options.push_back(corpus.vocab.detokenize(o));
  nlohmann::json rec{{"type", "probe"},
                     {"kind", q.kind == ProbeKind::kMcq ? "mcq" : "oeg"},
                     {"concept", q.concept_id},
                     {"relation", corpus.relations[q.relation].name},
                     {"question", corpus.vocab.detokenize(q.question)},
                     {"answer", corpus.vocab.detokenize(q.gold)}};
  if (q.kind == ProbeKind::kMcq) {
    rec["options"] = options;
    rec["gold_index"] = q.gold_index;
  }
  return rec;
}

// One JSON object per line: a config record, then relations, concepts,
// facts (with training occurrence counts) and probes of both kinds.
inline std::string corpus_jsonl(const Corpus& corpus) {
  std::ostringstream os;
  const auto& cfg = corpus.config;
  os << nlohmann::json{{"type", "config"},
                       {"seed", cfg.seed},
                       {"n_concepts", cfg.n_concepts},
                       {"tier_ratios", cfg.tier_ratios},
                       {"repetitions", cfg.repetitions},
                       {"n_relations", cfg.n_relations},
                       {"n_new_concepts", cfg.n_new_concepts},
                       {"new_repetitions", cfg.new_repetitions},
                       {"name_syllables", cfg.name_syllables},
                       {"syllable_pool", cfg.syllable_pool},
                       {"vocab_size", corpus.vocab.size()}}
            .dump()
     << '\n';
  for (std::size_t r = 0; r < corpus.relations.size(); ++r) {
    const auto& rel = corpus.relations[r];
    os << nlohmann::json{{"type", "relation"}, {"id", r}, {"name", rel.name}, {"phrase", rel.phrase}, {"values", rel.values}}
              .dump()
       << '\n';
  }
  for (const auto& c : corpus.concepts) {
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& a : c.attributes) {
      attrs.push_back({{"relation", corpus.relations[a.relation].name}, {"gold", a.gold}, {"distractors", a.distractors}});
    }
    os << nlohmann::json{{"type", "concept"}, {"id", c.id}, {"name", c.name}, {"tier", to_string(c.tier)}, {"attributes", attrs}}
              .dump()
       << '\n';
  }
  for (const auto& c : corpus.concepts) {
    for (std::size_t a = 0; a < c.attributes.size(); ++a) {
      const std::size_t occurrences =
          c.tier == Tier::kNew ? 0 : corpus.config.repetitions[static_cast<std::size_t>(c.tier)];
      os << nlohmann::json{{"type", "fact"},
                           {"concept", c.id},
                           {"relation", corpus.relations[c.attributes[a].relation].name},
                           {"value", c.attributes[a].gold},
                           {"occurrences", occurrences}}
                .dump()
         << '\n';
    }
  }
  for (const auto& c : corpus.concepts) {
    for (std::size_t a = 0; a < c.attributes.size(); ++a) {
      os << probe_record(corpus, make_probe(corpus, c.id, a, ProbeKind::kMcq)).dump() << '\n';
      os << probe_record(corpus, make_probe(corpus, c.id, a, ProbeKind::kOeg)).dump() << '\n';
    }
  }
  return os.str();
}

inline std::string vocab_text(const Vocabulary& vocab) {
  std::string out;
  for (const auto& w : vocab.words()) out += w + '\n';
  return out;
}

inline std::string sentences_text(const Corpus& corpus, std::span<const Sentence> sentences) {
  std::string out;
  for (const auto& s : sentences) {
    out += corpus.vocab.detokenize(std::span<const TokenId>(s.tokens).subspan(1, s.tokens.size() - 2));
    out += '\n';
  }
  return out;
}

// Writes corpus.jsonl, vocab.txt, train.tok, train.txt and (when new
// concepts exist) new_facts.tok / new_facts.txt into `dir`.
inline void write_corpus_files(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "corpus.jsonl", corpus_jsonl(corpus));
  io::write_file(dir / "vocab.txt", vocab_text(corpus.vocab));
  io::write_file(dir / "train.tok", serialize_token_stream(corpus.training_stream(), corpus.vocab.size()));
  io::write_file(dir / "train.txt", sentences_text(corpus, corpus.training));
  if (!corpus.new_facts.empty()) {
    std::vector<TokenId> stream;
    for (const auto& s : corpus.new_facts) stream.insert(stream.end(), s.tokens.begin(), s.tokens.end());
    io::write_file(dir / "new_facts.tok", serialize_token_stream(stream, corpus.vocab.size()));
    io::write_file(dir / "new_facts.txt", sentences_text(corpus, corpus.new_facts));
  }
}

}  // namespace pslab
