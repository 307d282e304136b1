#pragma once

// Next-token training (pretraining and masked fine-tuning) with AdamW.
//
// Batches are drawn from a per-epoch permutation of the sentence list that
// depends only on (seed, epoch), so the data order at any step is a pure
// function of the step number and a run resumed from a saved TrainState
// replays the uninterrupted run exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pslab/autodiff.hpp"
#include "pslab/checkpoint.hpp"
#include "pslab/corpus.hpp"
#include "pslab/error.hpp"
#include "pslab/model.hpp"
#include "pslab/random.hpp"
#include "pslab/surgery.hpp"

namespace pslab {

enum class LrDecay : std::uint8_t { kConstant = 0, kCosine = 1, kLinear = 2 };

inline LrDecay parse_lr_decay(std::string_view name) {
  if (name == "constant") return LrDecay::kConstant;
  if (name == "cosine") return LrDecay::kCosine;
  if (name == "linear") return LrDecay::kLinear;
  throw ConfigError("unknown learning-rate decay '" + std::string(name) + "'");
}

inline std::string_view to_string(LrDecay d) {
  switch (d) {
    case LrDecay::kConstant: return "constant";
    case LrDecay::kCosine: return "cosine";
    case LrDecay::kLinear: return "linear";
  }
  return "unknown";
}

struct TrainConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 32;  // sentences per step
  double lr = 3e-4;
  double warmup_fraction = 0.05;
  LrDecay decay = LrDecay::kConstant;
  double min_lr_fraction = 0.1;  // floor of the decayed rate, as a fraction of lr
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
  std::uint64_t seed = 1;

  void validate() const {
    if (steps < 1) throw ConfigError("training steps must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  }
};

// Learning rate applied at 0-based step `step`: linear warmup over the first
// warmup_fraction of the run, then the configured decay.
inline double learning_rate(const TrainConfig& c, std::size_t step) {
  const auto warmup = static_cast<std::size_t>(std::ceil(c.warmup_fraction * static_cast<double>(c.steps)));
  if (step < warmup) return c.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (c.decay == LrDecay::kConstant || c.steps <= warmup + 1) return c.lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(c.steps - warmup - 1);
  const double floor = c.min_lr_fraction * c.lr;
  if (c.decay == LrDecay::kLinear) return floor + (c.lr - floor) * (1.0 - progress);
  return floor + 0.5 * (c.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

// Which W_value rows (value vectors) may change during fine-tuning. Every
// other parameter is frozen.
struct GradientMask {
  std::vector<std::vector<std::uint8_t>> value_rows;  // [layer][row], 1 = trainable

  static GradientMask all(const ModelConfig& c, bool on = true) {
    return {std::vector<std::vector<std::uint8_t>>(c.n_layers, std::vector<std::uint8_t>(c.d_mlp, on ? 1 : 0))};
  }

  std::size_t selected(std::size_t layer) const {
    return static_cast<std::size_t>(std::count(value_rows.at(layer).begin(), value_rows.at(layer).end(), 1));
  }

  std::size_t total_selected() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < value_rows.size(); ++l) n += selected(l);
    return n;
  }

  void validate(const ModelConfig& c) const {
    if (value_rows.size() != c.n_layers) {
      throw ConfigError("gradient mask covers " + std::to_string(value_rows.size()) + " layers, model has " +
                        std::to_string(c.n_layers));
    }
    for (const auto& rows : value_rows) {
      if (rows.size() != c.d_mlp) {
        throw ConfigError("gradient mask row selector has length " + std::to_string(rows.size()) + ", expected " +
                          std::to_string(c.d_mlp));
      }
    }
  }
};

// ---------------------------------------------------------------- optimizer state

template <typename T>
struct TrainState {
  std::size_t step = 0;  // optimizer steps taken
  std::vector<Tensor<T>> first_moment;
  std::vector<Tensor<T>> second_moment;

  static TrainState zeros(const TransformerWeights<T>& w) {
    TrainState s;
    for (const auto& p : w.parameters()) {
      s.first_moment.emplace_back(p.value.shape());
      s.second_moment.emplace_back(p.value.shape());
    }
    return s;
  }

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

inline constexpr std::string_view kTrainStateMagic = "PSLABSTA";
inline constexpr std::uint32_t kTrainStateVersion = 1;

// Layout: magic, u32 version, u64 step, u32 tensor count, then per tensor a
// named record (as in checkpoints) for the first and second moments.
inline std::string serialize_train_state(const TrainState<float>& s, const TransformerWeights<float>& w) {
  std::string out(kTrainStateMagic);
  io::put<std::uint32_t>(out, kTrainStateVersion);
  io::put<std::uint64_t>(out, s.step);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(s.first_moment.size()));
  for (std::size_t i = 0; i < s.first_moment.size(); ++i) {
    io::put_named_tensor(out, "m." + w.parameters()[i].name, s.first_moment[i]);
    io::put_named_tensor(out, "v." + w.parameters()[i].name, s.second_moment[i]);
  }
  return out;
}

inline TrainState<float> deserialize_train_state(std::string_view bytes, const TransformerWeights<float>& w) {
  io::Reader in(bytes);
  if (in.take(kTrainStateMagic.size()) != kTrainStateMagic) throw FormatError("not a train-state file (bad magic)");
  if (in.get<std::uint32_t>() != kTrainStateVersion) throw FormatError("unsupported train-state version");
  TrainState<float> s;
  s.step = static_cast<std::size_t>(in.get<std::uint64_t>());
  const auto count = in.get<std::uint32_t>();
  if (count != w.parameters().size()) throw FormatError("train state does not match the model's parameter list");
  for (std::size_t i = 0; i < count; ++i) {
    auto m = io::get_named_tensor(in);
    auto v = io::get_named_tensor(in);
    const auto& p = w.parameters()[i];
    if (m.name != "m." + p.name || v.name != "v." + p.name || m.value.shape() != p.value.shape() ||
        v.value.shape() != p.value.shape()) {
      throw FormatError("train state record mismatch at '" + p.name + "'");
    }
    s.first_moment.push_back(std::move(m.value));
    s.second_moment.push_back(std::move(v.value));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after train state");
  return s;
}

// ---------------------------------------------------------------- data order

// Sentence indices for the step-th batch. Position p of the infinite stream
// is element (p mod N) of the permutation for epoch p / N.
inline std::vector<std::size_t> batch_indices(std::size_t n_sentences, std::size_t batch_size, std::uint64_t seed,
                                              std::size_t step) {
  if (n_sentences == 0) throw DataError("training set is empty");
  std::vector<std::size_t> out;
  std::size_t cached_epoch = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> perm;
  for (std::size_t p = step * batch_size; p < (step + 1) * batch_size; ++p) {
    const std::size_t epoch = p / n_sentences;
    if (epoch != cached_epoch) {
      perm.resize(n_sentences);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng = make_rng(seed, 0xE0000000ULL + epoch);
      shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[p % n_sentences]);
  }
  return out;
}

// Packs sequences and builds next-token targets; the final position of each
// sequence has no target.
inline std::pair<PackedBatch, std::vector<std::int32_t>> lm_batch(std::span<const Sentence> sentences,
                                                                  std::span<const std::size_t> indices) {
  PackedBatch batch;
  std::vector<std::int32_t> targets;
  for (std::size_t i : indices) {
    const auto& toks = sentences[i].tokens;
    batch.add(toks);
    for (std::size_t p = 0; p < toks.size(); ++p) {
      targets.push_back(p + 1 < toks.size() ? toks[p + 1] : ad::kIgnoreTarget);
    }
  }
  return {std::move(batch), std::move(targets)};
}

// Mean next-token loss of the whole sentence list (no gradient).
template <typename T>
double evaluate_loss(const TransformerWeights<T>& weights, std::span<const Sentence> sentences,
                     std::size_t batch_size = 64) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < sentences.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(sentences.size(), start + batch_size); ++i) idx.push_back(i);
    auto [batch, targets] = lm_batch(sentences, idx);
    const auto result = forward(weights, batch);
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] == ad::kIgnoreTarget) continue;
      total -= log_softmax_row(result.logits.row(r))[static_cast<std::size_t>(targets[r])];
      ++count;
    }
  }
  if (count == 0) throw DataError("evaluate_loss: no targets");
  return total / static_cast<double>(count);
}

// ---------------------------------------------------------------- trainer

template <typename T>
class Trainer {
 public:
  // With a gradient mask only the selected W_value rows are updated.
  Trainer(TransformerWeights<T>& weights, std::span<const Sentence> data, TrainConfig config,
          std::optional<GradientMask> mask = std::nullopt, std::optional<TrainState<T>> state = std::nullopt)
      : weights_(&weights), data_(data), config_(std::move(config)), mask_(std::move(mask)) {
    config_.validate();
    if (data_.empty()) throw DataError("training set is empty");
    if (mask_) mask_->validate(weights.config());
    state_ = state ? std::move(*state) : TrainState<T>::zeros(weights);
    if (state_.first_moment.size() != weights.parameters().size()) {
      throw ConfigError("train state does not match the model");
    }
    trainable_.assign(weights.parameters().size(), mask_ ? 0 : 1);
    if (mask_) {
      for (std::size_t l = 0; l < weights.config().n_layers; ++l) {
        trainable_[weights.layer(l).w_value] = mask_->selected(l) > 0 ? 1 : 0;
      }
    }
  }

  const TrainState<T>& state() const noexcept { return state_; }
  std::size_t step() const noexcept { return state_.step; }
  bool done() const noexcept { return state_.step >= config_.steps; }

  // One optimizer step; returns the batch loss before the update.
  double step_once() {
    if (done()) throw UsageError("trainer already ran all configured steps");
    auto& w = *weights_;
    const auto idx = batch_indices(data_.size(), config_.batch_size, config_.seed, state_.step);
    auto [batch, targets] = lm_batch(data_, idx);

    ad::Graph<T> g(true);
    std::vector<ad::Var> params;
    for (std::size_t i = 0; i < w.parameters().size(); ++i) {
      const auto& value = w.parameters()[i].value;
      params.push_back(trainable_[i] ? g.parameter(value) : g.constant_ref(value));
    }
    ad::Var logits = build_forward(g, w, params, batch, ForwardOptions{});
    ad::Var loss = ad::cross_entropy(g, logits, targets);
    const double loss_value = static_cast<double>(g.value(loss)[0]);
    if (!std::isfinite(loss_value)) {
      throw TrainingError("loss diverged (non-finite) at step " + std::to_string(state_.step));
    }
    g.backward(loss);

    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trainable_[i] || !g.has_grad(params[i])) continue;
      const auto& grad = g.grad(params[i]);
      const auto* rows = row_mask(i);
      const std::size_t width = grad.cols();
      for (std::size_t k = 0; k < grad.numel(); ++k) {
        if (rows != nullptr && !(*rows)[k / width]) continue;
        sq += static_cast<double>(grad[k]) * static_cast<double>(grad[k]);
      }
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingError("gradient diverged (non-finite) at step " + std::to_string(state_.step));
    const double clip = (config_.clip_norm > 0.0 && norm > config_.clip_norm) ? config_.clip_norm / norm : 1.0;

    const double lr = learning_rate(config_, state_.step);
    const double t = static_cast<double>(state_.step + 1);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!trainable_[i] || !g.has_grad(params[i])) continue;
      const auto& grad = g.grad(params[i]);
      auto& value = w.parameters()[i].value;
      auto& m = state_.first_moment[i];
      auto& v = state_.second_moment[i];
      const auto* rows = row_mask(i);
      const std::size_t width = value.cols();
      // Decay only matrices; gains, biases stay undecayed.
      const double wd = value.rank() == 2 ? config_.weight_decay : 0.0;
      for (std::size_t k = 0; k < value.numel(); ++k) {
        if (rows != nullptr && !(*rows)[k / width]) continue;
        const double gk = static_cast<double>(grad[k]) * clip;
        const double mk = config_.beta1 * static_cast<double>(m[k]) + (1.0 - config_.beta1) * gk;
        const double vk = config_.beta2 * static_cast<double>(v[k]) + (1.0 - config_.beta2) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double update = (mk / bc1) / (std::sqrt(vk / bc2) + config_.eps) + wd * static_cast<double>(value[k]);
        value[k] = static_cast<T>(static_cast<double>(value[k]) - lr * update);
      }
      require_finite(value, "optimizer update");
    }
    ++state_.step;
    return loss_value;
  }

 private:
  const std::vector<std::uint8_t>* row_mask(std::size_t slot) const {
    if (!mask_) return nullptr;
    for (std::size_t l = 0; l < weights_->config().n_layers; ++l) {
      if (weights_->layer(l).w_value == slot) return &mask_->value_rows[l];
    }
    return nullptr;
  }

  TransformerWeights<T>* weights_;
  std::span<const Sentence> data_;
  TrainConfig config_;
  std::optional<GradientMask> mask_;
  TrainState<T> state_;
  std::vector<std::uint8_t> trainable_;
};

// Runs a trainer to completion, calling `on_checkpoint` after each step listed
// in `checkpoints` (1-based step counts) and `on_step` after every step.
template <typename T>
void run_training(Trainer<T>& trainer, const TransformerWeights<T>& weights, std::span<const std::size_t> checkpoints,
                  const std::function<void(std::size_t, const TransformerWeights<T>&, const TrainState<T>&)>& on_checkpoint,
                  const std::function<void(std::size_t, double)>& on_step = {}) {
  while (!trainer.done()) {
    const double loss = trainer.step_once();
    const std::size_t s = trainer.step();
    if (on_step) on_step(s, loss);
    if (on_checkpoint && std::find(checkpoints.begin(), checkpoints.end(), s) != checkpoints.end()) {
      on_checkpoint(s, weights, trainer.state());
    }
  }
}

inline void validate_checkpoint_schedule(std::span<const std::size_t> checkpoints, std::size_t steps) {
  for (std::size_t c : checkpoints) {
    if (c < 1 || c > steps) {
      throw ConfigError("checkpoint step " + std::to_string(c) + " outside [1, " + std::to_string(steps) + "]");
    }
  }
}

// Trains freshly initialized weights on the corpus's pretraining sentences.
template <typename T>
TransformerWeights<T> pretrain(const ModelConfig& model, const Corpus& corpus, const TrainConfig& train,
                               std::span<const std::size_t> checkpoints = {},
                               const std::function<void(std::size_t, const TransformerWeights<T>&,
                                                        const TrainState<T>&)>& on_checkpoint = {},
                               const std::function<void(std::size_t, double)>& on_step = {}) {
  train.validate();
  validate_checkpoint_schedule(checkpoints, train.steps);
  auto weights = TransformerWeights<T>::initialized(model, train.seed);
  Trainer<T> trainer(weights, corpus.training, train);
  run_training(trainer, weights, checkpoints, on_checkpoint, on_step);
  return weights;
}

// ---------------------------------------------------------------- fine-tuning variants

enum class FtVariant : std::uint8_t { kFull = 0, kPrecise = 1, kComplement = 2, kRandom = 3 };

inline std::string_view to_string(FtVariant v) {
  switch (v) {
    case FtVariant::kFull: return "FT-FV";
    case FtVariant::kPrecise: return "FT-PV";
    case FtVariant::kComplement: return "FT-CV";
    case FtVariant::kRandom: return "FT-RV";
  }
  return "unknown";
}

inline FtVariant parse_ft_variant(std::string_view name) {
  for (auto v : {FtVariant::kFull, FtVariant::kPrecise, FtVariant::kComplement, FtVariant::kRandom}) {
    if (to_string(v) == name) return v;
  }
  std::string lower(name);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (lower == "fv" || lower == "full") return FtVariant::kFull;
  if (lower == "pv" || lower == "precise") return FtVariant::kPrecise;
  if (lower == "cv" || lower == "complement") return FtVariant::kComplement;
  if (lower == "rv" || lower == "random") return FtVariant::kRandom;
  throw ConfigError("unknown fine-tuning variant '" + std::string(name) + "' (expected FT-FV, FT-PV, FT-CV or FT-RV)");
}

// How FT-PV orders value vectors.
enum class FtRanking : std::uint8_t { kContrastive = 0, kMagnitude = 1 };

inline FtRanking parse_ft_ranking(std::string_view name) {
  if (name == "contrastive") return FtRanking::kContrastive;
  if (name == "magnitude") return FtRanking::kMagnitude;
  throw ConfigError("unknown fine-tuning ranking '" + std::string(name) + "'");
}

struct FtSelection {
  FtVariant variant = FtVariant::kPrecise;
  double ratio = 0.5;  // k; FT-PV takes round(k * n / 8) rows per maskable layer
  std::uint64_t seed = 1;
  std::optional<std::size_t> skip_layers;
  PositionSelector selector = PositionSelector::kAnswer;
  FtRanking ranking = FtRanking::kContrastive;
};

inline std::size_t ft_row_count(std::size_t n, double ratio) { return mask_count(n, ratio / 8.0); }

// Value vectors ordered by mean |coefficient| on the given questions.
inline Ranking rank_by_magnitude(const LayerVectors& mean) {
  LayerVectors zero;
  for (const auto& layer : mean) zero.emplace_back(layer.size(), 0.0);
  return rank_vectors(mean, zero);
}

template <typename T>
GradientMask select_ft_columns(const TransformerWeights<T>& weights, const Vocabulary& vocab,
                               std::span<const ProbeQuestion> new_concept_questions,
                               std::span<const ProbeQuestion> irrelevant_questions, const FtSelection& sel) {
  const ModelConfig& cfg = weights.config();
  if (sel.variant == FtVariant::kFull) return GradientMask::all(cfg);
  const std::size_t skip = sel.skip_layers.value_or(default_skip_layers(cfg.n_layers));
  const std::size_t count = ft_row_count(cfg.d_mlp, sel.ratio);
  GradientMask mask = GradientMask::all(cfg, false);
  if (sel.variant == FtVariant::kRandom) {
    for (std::size_t l = skip; l < cfg.n_layers; ++l) {
      std::vector<std::size_t> rows(cfg.d_mlp);
      std::iota(rows.begin(), rows.end(), std::size_t{0});
      Rng rng = make_rng(sel.seed, 0xF700 + l);
      shuffle(rows.begin(), rows.end(), rng);
      for (std::size_t i = 0; i < count; ++i) mask.value_rows[l][rows[i]] = 1;
    }
    return mask;
  }
  if (new_concept_questions.empty()) throw UsageError("FT-PV/FT-CV selection needs new-concept probe questions");
  const auto mean = collect_mean_coefficients(weights, vocab, new_concept_questions, sel.selector);
  Ranking ranking;
  if (sel.ranking == FtRanking::kMagnitude) {
    ranking = rank_by_magnitude(mean);
  } else {
    if (irrelevant_questions.empty()) throw UsageError("contrastive FT-PV selection needs irrelevant questions");
    ranking = rank_vectors(mean, collect_mean_coefficients(weights, vocab, irrelevant_questions, sel.selector));
  }
  for (std::size_t l = skip; l < cfg.n_layers; ++l) {
    for (std::size_t i = 0; i < count; ++i) mask.value_rows[l][ranking[l][i]] = 1;
  }
  if (sel.variant == FtVariant::kComplement) {
    for (auto& rows : mask.value_rows) {
      for (auto& r : rows) r = r ? 0 : 1;
    }
  }
  return mask;
}

// Fine-tunes a copy of `weights` on `text`, updating only the masked W_value rows.
template <typename T>
TransformerWeights<T> finetune(const TransformerWeights<T>& weights, std::span<const Sentence> text,
                               const GradientMask& mask, const TrainConfig& train,
                               const std::function<void(std::size_t, double)>& on_step = {}) {
  mask.validate(weights.config());
  TransformerWeights<T> out = weights;
  if (mask.total_selected() == 0) return out;
  Trainer<T> trainer(out, text, train, mask);
  run_training<T>(trainer, out, {}, {}, on_step);
  return out;
}

}  // namespace pslab
