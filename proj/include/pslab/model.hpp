#pragma once

// Decoder-only transformer whose MLP sublayers are exposed as key-value
// memories: for layer l the coefficients m = f(LN(x + A) W_key) multiply the
// value vectors (rows of W_value), M = m W_value = sum_j m_j v_j, and the
// residual stream advances as X' = X + A + M.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pslab/autodiff.hpp"
#include "pslab/error.hpp"
#include "pslab/random.hpp"
#include "pslab/tensor.hpp"

namespace pslab {

using TokenId = std::int32_t;

enum class MlpStyle : std::uint8_t { kTwoMatrix = 0, kGated = 1 };

inline std::string_view to_string(MlpStyle style) {
  return style == MlpStyle::kTwoMatrix ? "two-matrix" : "three-matrix-gated";
}

struct ModelConfig {
  std::size_t n_layers = 6;
  std::size_t d_model = 128;
  std::size_t d_mlp = 512;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 512;
  std::size_t max_seq = 128;
  ActivationKind activation = ActivationKind::kGelu;
  MlpStyle mlp_style = MlpStyle::kTwoMatrix;

  void validate() const {
    if (n_layers == 0) throw ConfigError("model.n_layers must be positive");
    if (d_model == 0 || n_heads == 0) throw ConfigError("model.d_model and model.n_heads must be positive");
    if (d_model % n_heads != 0) {
      throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (d_mlp < d_model) throw ConfigError("model.d_mlp must be at least model.d_model");
    if (vocab_size == 0) throw ConfigError("model.vocab_size must be positive");
    if (max_seq == 0) throw ConfigError("model.max_seq must be positive");
    if (static_cast<int>(activation) > 2) throw ConfigError("model.activation is not a known kind");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline ActivationKind parse_activation(std::string_view name) {
  if (name == "relu") return ActivationKind::kRelu;
  if (name == "gelu") return ActivationKind::kGelu;
  if (name == "silu" || name == "silu-gated") return ActivationKind::kSilu;
  throw ConfigError("unknown activation '" + std::string(name) + "' (expected relu, gelu or silu-gated)");
}

inline MlpStyle parse_mlp_style(std::string_view name) {
  if (name == "two-matrix") return MlpStyle::kTwoMatrix;
  if (name == "three-matrix-gated") return MlpStyle::kGated;
  throw ConfigError("unknown mlp style '" + std::string(name) + "' (expected two-matrix or three-matrix-gated)");
}

// Layers kept unmasked at the bottom of the stack: five out of ~32 in the
// reference setting, scaled proportionally for shallower models.
inline std::size_t default_skip_layers(std::size_t n_layers) {
  if (n_layers >= 32) return 5;
  const auto scaled = static_cast<std::size_t>(std::llround(5.0 * static_cast<double>(n_layers) / 32.0));
  return std::max<std::size_t>(1, scaled);
}

// ---------------------------------------------------------------- weights

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

struct LayerSlots {
  std::size_t ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w_key, w_value;
  std::optional<std::size_t> w_gate;
};

inline std::string layer_param_name(std::size_t layer, std::string_view leaf) {
  return "layers." + std::to_string(layer) + "." + std::string(leaf);
}

template <typename T>
class TransformerWeights {
 public:
  TransformerWeights() = default;

  // Zero-filled parameters laid out for `config`.
  explicit TransformerWeights(ModelConfig config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model;
    const std::size_t n = config_.d_mlp;
    add("tok_emb", {config_.vocab_size, d});
    add("pos_emb", {config_.max_seq, d});
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      LayerSlots s{};
      s.ln1_gain = add(layer_param_name(l, "ln1.gain"), {d}, T{1});
      s.ln1_bias = add(layer_param_name(l, "ln1.bias"), {d});
      s.wq = add(layer_param_name(l, "attn.wq"), {d, d});
      s.wk = add(layer_param_name(l, "attn.wk"), {d, d});
      s.wv = add(layer_param_name(l, "attn.wv"), {d, d});
      s.wo = add(layer_param_name(l, "attn.wo"), {d, d});
      s.ln2_gain = add(layer_param_name(l, "ln2.gain"), {d}, T{1});
      s.ln2_bias = add(layer_param_name(l, "ln2.bias"), {d});
      s.w_key = add(layer_param_name(l, "mlp.w_key"), {d, n});
      if (config_.mlp_style == MlpStyle::kGated) s.w_gate = add(layer_param_name(l, "mlp.w_gate"), {d, n});
      s.w_value = add(layer_param_name(l, "mlp.w_value"), {n, d});
      layers_.push_back(s);
    }
    ln_f_gain_ = add("ln_f.gain", {d}, T{1});
    ln_f_bias_ = add("ln_f.bias", {d});
    head_ = add("head", {d, config_.vocab_size});
  }

  // Gaussian init (std 0.02); residual output projections scaled by 1/sqrt(2L).
  static TransformerWeights initialized(ModelConfig config, std::uint64_t seed) {
    TransformerWeights w(config);
    Rng rng = make_rng(seed, 0x1417);
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    for (auto& p : w.params_) {
      if (p.value.rank() != 2) continue;
      double std_dev = 0.02;
      if (p.name.ends_with("attn.wo") || p.name.ends_with("mlp.w_value")) std_dev *= residual_scale;
      for (auto& v : p.value.data()) {
        // Box-Muller on our own uniform source keeps init identical across standard libraries.
        const double u1 = 1.0 - uniform01(rng);
        const double u2 = uniform01(rng);
        v = static_cast<T>(std_dev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
      }
    }
    return w;
  }

  const ModelConfig& config() const noexcept { return config_; }

  std::vector<NamedTensor<T>>& parameters() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const noexcept { return params_; }

  std::optional<std::size_t> find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  Tensor<T>& get(std::string_view name) { return params_[require(name)].value; }
  const Tensor<T>& get(std::string_view name) const { return params_[require(name)].value; }

  Tensor<T>& at(std::size_t slot) { return params_[slot].value; }
  const Tensor<T>& at(std::size_t slot) const { return params_[slot].value; }

  const LayerSlots& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t tok_emb_slot() const noexcept { return 0; }
  std::size_t pos_emb_slot() const noexcept { return 1; }
  std::size_t ln_f_gain_slot() const noexcept { return ln_f_gain_; }
  std::size_t ln_f_bias_slot() const noexcept { return ln_f_bias_; }
  std::size_t head_slot() const noexcept { return head_; }

  Tensor<T>& w_key(std::size_t l) { return at(layer(l).w_key); }
  const Tensor<T>& w_key(std::size_t l) const { return at(layer(l).w_key); }
  Tensor<T>& w_value(std::size_t l) { return at(layer(l).w_value); }
  const Tensor<T>& w_value(std::size_t l) const { return at(layer(l).w_value); }

  // Value vector j of layer l (row j of W_value, length d_model).
  std::span<const T> value_vector(std::size_t l, std::size_t j) const { return w_value(l).row(j); }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.numel();
    return total;
  }

  template <typename U>
  TransformerWeights<U> cast() const {
    TransformerWeights<U> out(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i].value = params_[i].value.template cast<U>();
    return out;
  }

  friend bool operator==(const TransformerWeights& a, const TransformerWeights& b) {
    if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i) {
      if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
    }
    return true;
  }

 private:
  std::size_t add(std::string name, Shape shape, T fill = T{0}) {
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), Tensor<T>(std::move(shape), fill)});
    return params_.size() - 1;
  }

  std::size_t require(std::string_view name) const {
    auto slot = find(name);
    if (!slot) throw UsageError("no parameter named '" + std::string(name) + "'");
    return *slot;
  }

  ModelConfig config_{};
  std::vector<NamedTensor<T>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::vector<LayerSlots> layers_;
  std::size_t ln_f_gain_ = 0;
  std::size_t ln_f_bias_ = 0;
  std::size_t head_ = 0;
};

// ---------------------------------------------------------------- masks

// Per-layer sets of value-vector indices (0-based) whose coefficients are
// forced to zero. Layers below skip_layers always carry empty sets.
struct MaskSpec {
  std::vector<std::vector<std::size_t>> layers;
  std::size_t skip_layers = 0;

  static MaskSpec none(std::size_t n_layers) { return MaskSpec{std::vector<std::vector<std::size_t>>(n_layers), 0}; }

  bool is_empty() const {
    return std::all_of(layers.begin(), layers.end(), [](const auto& s) { return s.empty(); });
  }

  std::size_t masked_count() const {
    std::size_t total = 0;
    for (const auto& s : layers) total += s.size();
    return total;
  }

  void validate(const ModelConfig& config) const {
    if (layers.size() != config.n_layers) {
      throw MaskError("mask has " + std::to_string(layers.size()) + " layers, model has " +
                      std::to_string(config.n_layers));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (l < skip_layers && !layers[l].empty()) {
        throw MaskError("layer " + std::to_string(l) + " is below skip_layers but has a non-empty mask");
      }
      for (std::size_t j : layers[l]) {
        if (j >= config.d_mlp) {
          throw MaskError("mask index " + std::to_string(j) + " in layer " + std::to_string(l) +
                          " is not below d_mlp=" + std::to_string(config.d_mlp));
        }
      }
    }
  }

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

// ---------------------------------------------------------------- forward

// Several sequences concatenated row-wise; offsets delimit them.
struct PackedBatch {
  std::vector<TokenId> tokens;
  std::vector<std::size_t> offsets{0};

  void add(std::span<const TokenId> sequence) {
    tokens.insert(tokens.end(), sequence.begin(), sequence.end());
    offsets.push_back(tokens.size());
  }
  std::size_t sequences() const noexcept { return offsets.size() - 1; }
  std::size_t begin_of(std::size_t s) const { return offsets.at(s); }
  std::size_t length_of(std::size_t s) const { return offsets.at(s + 1) - offsets.at(s); }

  static PackedBatch single(std::span<const TokenId> sequence) {
    PackedBatch b;
    b.add(sequence);
    return b;
  }
};

// Post-nonlinearity MLP coefficients (the multipliers of the value vectors),
// recorded before any masking. layers[l] has one row of length d_mlp per
// retained position; positions[i] is the packed-batch row of retained row i.
template <typename T>
struct CoefficientTrace {
  std::vector<Tensor<T>> layers;
  std::vector<std::size_t> positions;

  CoefficientTrace select(std::span<const std::size_t> rows) const {
    CoefficientTrace out;
    for (const auto& full : layers) {
      Tensor<T> kept({rows.size(), full.cols()});
      for (std::size_t i = 0; i < rows.size(); ++i) {
        auto src = full.row(rows[i]);
        std::copy(src.begin(), src.end(), kept.row(i).begin());
      }
      out.layers.push_back(std::move(kept));
    }
    for (std::size_t r : rows) out.positions.push_back(positions.at(r));
    return out;
  }
};

// Per-layer views of the residual stream: residual[l] is X^l (residual[L] is
// the stream after the last block), attention[l] is A^l and mlp[l] is M^l.
template <typename T>
struct LayerTaps {
  std::vector<Tensor<T>> residual;
  std::vector<Tensor<T>> attention;
  std::vector<Tensor<T>> mlp;
};

struct ForwardOptions {
  const MaskSpec* mask = nullptr;
  bool capture = false;
  bool taps = false;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  std::optional<CoefficientTrace<T>> trace;
  std::optional<LayerTaps<T>> taps;
};

template <typename T>
std::vector<ad::Var> bind_parameters(ad::Graph<T>& g, const TransformerWeights<T>& weights) {
  std::vector<ad::Var> vars;
  vars.reserve(weights.parameters().size());
  for (const auto& p : weights.parameters()) vars.push_back(g.parameter(p.value));
  return vars;
}

namespace detail {

// IEEE total order on floats, so -0 and +0 sort apart.
template <typename T>
bool total_less(T a, T b) {
  if (a < b) return true;
  if (b < a) return false;
  return std::signbit(a) && !std::signbit(b);
}

}  // namespace detail

// A canonical order of layer l's value vectors: lexicographic on the value
// vector, then its key column, then its gate column. It depends only on the
// multiset of (key, gate, value) triples, so two models that differ by a
// permutation of value vectors share it.
template <typename T>
std::vector<std::size_t> canonical_value_order(const TransformerWeights<T>& weights, std::size_t l) {
  const auto& wv = weights.w_value(l);
  const auto& wk = weights.w_key(l);
  const LayerSlots& s = weights.layer(l);
  const Tensor<T>* wg = s.w_gate ? &weights.at(*s.w_gate) : nullptr;
  const std::size_t n = wv.rows();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto less = [&](std::size_t a, std::size_t b) {
    auto ra = wv.row(a);
    auto rb = wv.row(b);
    for (std::size_t k = 0; k < ra.size(); ++k) {
      if (detail::total_less(ra[k], rb[k])) return true;
      if (detail::total_less(rb[k], ra[k])) return false;
    }
    for (const Tensor<T>* m : {&wk, wg}) {
      if (m == nullptr) continue;
      for (std::size_t r = 0; r < m->rows(); ++r) {
        const T x = (*m)(r, a);
        const T y = (*m)(r, b);
        if (detail::total_less(x, y)) return true;
        if (detail::total_less(y, x)) return false;
      }
    }
    return false;
  };
  std::sort(order.begin(), order.end(), less);
  return order;
}

namespace detail {

template <typename T>
ad::Var mlp_coefficients(ad::Graph<T>& g, const ModelConfig& cfg, ad::Var m_in, ad::Var w_key, ad::Var w_gate) {
  if (cfg.mlp_style == MlpStyle::kGated) {
    ad::Var gate = ad::activation(g, ad::matmul(g, m_in, w_gate), cfg.activation);
    return ad::mul(g, gate, ad::matmul(g, m_in, w_key));
  }
  return ad::activation(g, ad::matmul(g, m_in, w_key), cfg.activation);
}

// MLP sublayer in stored order. Coefficients are captured before masking.
template <typename T>
ad::Var mlp_block(ad::Graph<T>& g, const ModelConfig& cfg, ad::Var m_in, ad::Var w_key, ad::Var w_gate,
                  ad::Var w_value, std::span<const std::size_t> masked, std::vector<Tensor<T>>* capture) {
  ad::Var coeff = mlp_coefficients(g, cfg, m_in, w_key, w_gate);
  if (capture != nullptr) capture->push_back(g.value(coeff));
  if (!masked.empty()) coeff = ad::zero_columns(g, coeff, masked);
  return ad::matmul(g, coeff, w_value);
}

// Same function evaluated with value vectors gathered into canonical order,
// so outputs are bit-identical across value-vector permutations. Captured
// coefficients and mask indices stay in stored order.
template <typename T>
ad::Var canonical_mlp_block(ad::Graph<T>& g, const TransformerWeights<T>& weights, std::size_t l, ad::Var m_in,
                            std::span<const std::size_t> masked, std::vector<Tensor<T>>* capture) {
  const ModelConfig& cfg = weights.config();
  const LayerSlots& s = weights.layer(l);
  const auto order = canonical_value_order(weights, l);
  const std::size_t n = order.size();
  auto gather_columns = [&](const Tensor<T>& m) {
    Tensor<T> out(m.shape());
    for (std::size_t r = 0; r < m.rows(); ++r) {
      for (std::size_t c = 0; c < n; ++c) out(r, c) = m(r, order[c]);
    }
    return out;
  };
  Tensor<T> wv(weights.w_value(l).shape());
  for (std::size_t c = 0; c < n; ++c) {
    auto src = weights.w_value(l).row(order[c]);
    std::copy(src.begin(), src.end(), wv.row(c).begin());
  }
  ad::Var w_key = g.constant(gather_columns(weights.w_key(l)));
  ad::Var w_gate = s.w_gate ? g.constant(gather_columns(weights.at(*s.w_gate))) : ad::Var{};
  ad::Var coeff = mlp_coefficients(g, cfg, m_in, w_key, w_gate);
  if (capture != nullptr) {
    const Tensor<T>& cv = g.value(coeff);
    Tensor<T> stored(cv.shape());
    for (std::size_t r = 0; r < cv.rows(); ++r) {
      for (std::size_t c = 0; c < n; ++c) stored(r, order[c]) = cv(r, c);
    }
    capture->push_back(std::move(stored));
  }
  if (!masked.empty()) {
    std::vector<std::size_t> position(n);
    for (std::size_t c = 0; c < n; ++c) position[order[c]] = c;
    std::vector<std::size_t> cols;
    cols.reserve(masked.size());
    for (std::size_t j : masked) {
      if (j >= n) throw MaskError("mask index " + std::to_string(j) + " outside [0, " + std::to_string(n) + ")");
      cols.push_back(position[j]);
    }
    coeff = ad::zero_columns(g, coeff, cols);
  }
  return ad::matmul(g, coeff, g.constant(std::move(wv)));
}

}  // namespace detail

// Records the forward pass into `g` and returns the logits variable. `sink`
// (optional) receives the coefficient trace and layer taps.
template <typename T>
ad::Var build_forward(ad::Graph<T>& g, const TransformerWeights<T>& weights, std::span<const ad::Var> params,
                      const PackedBatch& batch, const ForwardOptions& options, ForwardResult<T>* sink = nullptr) {
  const ModelConfig& cfg = weights.config();
  if (batch.tokens.empty()) throw InputError("forward: empty token sequence");
  if (batch.offsets.front() != 0 || batch.offsets.back() != batch.tokens.size()) {
    throw InputError("forward: batch offsets do not cover the token buffer");
  }
  for (TokenId t : batch.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
  std::vector<TokenId> positions(batch.tokens.size());
  for (std::size_t s = 0; s < batch.sequences(); ++s) {
    const std::size_t len = batch.length_of(s);
    if (len > cfg.max_seq) {
      throw InputError("sequence of length " + std::to_string(len) + " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    for (std::size_t i = 0; i < len; ++i) positions[batch.begin_of(s) + i] = static_cast<TokenId>(i);
  }
  const MaskSpec* mask = options.mask;
  if (mask != nullptr) {
    mask->validate(cfg);
    if (mask->is_empty()) mask = nullptr;
  }

  const bool capture = sink != nullptr && options.capture;
  const bool taps = sink != nullptr && options.taps;
  if (capture) {
    sink->trace.emplace();
    sink->trace->positions.resize(batch.tokens.size());
    for (std::size_t i = 0; i < batch.tokens.size(); ++i) sink->trace->positions[i] = i;
  }
  if (taps) sink->taps.emplace();

  ad::Var x = ad::add(g, ad::embedding(g, params[weights.tok_emb_slot()], batch.tokens),
                      ad::embedding(g, params[weights.pos_emb_slot()], positions));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const LayerSlots& s = weights.layer(l);
    if (taps) sink->taps->residual.push_back(g.value(x));

    ad::Var a_in = ad::layer_norm(g, x, params[s.ln1_gain], params[s.ln1_bias]);
    ad::Var q = ad::matmul(g, a_in, params[s.wq]);
    ad::Var k = ad::matmul(g, a_in, params[s.wk]);
    ad::Var v = ad::matmul(g, a_in, params[s.wv]);
    ad::Var att = ad::causal_attention(g, q, k, v, std::span<const std::size_t>(batch.offsets), cfg.n_heads);
    ad::Var attn_out = ad::matmul(g, att, params[s.wo]);
    ad::Var h = ad::add(g, x, attn_out);

    ad::Var m_in = ad::layer_norm(g, h, params[s.ln2_gain], params[s.ln2_bias]);
    const std::span<const std::size_t> masked =
        mask != nullptr ? std::span<const std::size_t>(mask->layers[l]) : std::span<const std::size_t>{};
    auto* trace = capture ? &sink->trace->layers : nullptr;
    // Evaluation runs the MLP in canonical value-vector order so that
    // permuting value vectors (with their keys) leaves outputs bit-identical.
    ad::Var mlp_out =
        g.grad_enabled()
            ? detail::mlp_block(g, cfg, m_in, params[s.w_key], s.w_gate ? params[*s.w_gate] : ad::Var{},
                                params[s.w_value], masked, trace)
            : detail::canonical_mlp_block(g, weights, l, m_in, masked, trace);
    x = ad::add(g, h, mlp_out);
    if (taps) {
      sink->taps->attention.push_back(g.value(attn_out));
      sink->taps->mlp.push_back(g.value(mlp_out));
    }
  }
  if (taps) sink->taps->residual.push_back(g.value(x));
  ad::Var final_norm = ad::layer_norm(g, x, params[weights.ln_f_gain_slot()], params[weights.ln_f_bias_slot()]);
  return ad::matmul(g, final_norm, params[weights.head_slot()]);
}

template <typename T>
ForwardResult<T> forward(const TransformerWeights<T>& weights, const PackedBatch& batch,
                         const ForwardOptions& options = {}) {
  ad::Graph<T> g(false);
  const auto params = bind_parameters(g, weights);
  ForwardResult<T> result;
  ad::Var logits = build_forward(g, weights, params, batch, options, &result);
  result.logits = g.value(logits);
  return result;
}

template <typename T>
ForwardResult<T> forward(const TransformerWeights<T>& weights, std::span<const TokenId> tokens,
                         const ForwardOptions& options = {}) {
  return forward(weights, PackedBatch::single(tokens), options);
}

// ---------------------------------------------------------------- scoring

template <typename T>
std::vector<double> log_softmax_row(std::span<const T> row) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : row) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (T v : row) z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = row[i] - log_z;
  return out;
}

struct ScoringItem {
  std::vector<TokenId> prompt;
  std::vector<TokenId> continuation;
};

// Sum of log p(continuation | prompt) for every item, evaluated in one packed forward.
template <typename T>
std::vector<double> sequence_logliks(const TransformerWeights<T>& weights, std::span<const ScoringItem> items,
                                     const MaskSpec* mask = nullptr) {
  PackedBatch batch;
  for (const auto& item : items) {
    if (item.continuation.empty()) throw UsageError("sequence_loglik: empty continuation");
    if (item.prompt.empty()) throw UsageError("sequence_loglik: empty prompt");
    if (item.prompt.size() + item.continuation.size() > weights.config().max_seq) {
      throw InputError("sequence_loglik: prompt plus continuation exceeds max_seq");
    }
    std::vector<TokenId> seq = item.prompt;
    seq.insert(seq.end(), item.continuation.begin(), item.continuation.end());
    batch.add(seq);
  }
  std::vector<double> out;
  if (items.empty()) return out;
  ForwardOptions opts;
  opts.mask = mask;
  const auto result = forward(weights, batch, opts);
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::size_t base = batch.begin_of(i) + items[i].prompt.size() - 1;
    double total = 0.0;
    for (std::size_t c = 0; c < items[i].continuation.size(); ++c) {
      const auto lsm = log_softmax_row(result.logits.row(base + c));
      total += lsm[static_cast<std::size_t>(items[i].continuation[c])];
    }
    out.push_back(total);
  }
  return out;
}

template <typename T>
double sequence_loglik(const TransformerWeights<T>& weights, std::span<const TokenId> prompt,
                       std::span<const TokenId> continuation, const MaskSpec* mask = nullptr) {
  const ScoringItem item{{prompt.begin(), prompt.end()}, {continuation.begin(), continuation.end()}};
  return sequence_logliks(weights, std::span<const ScoringItem>(&item, 1), mask).front();
}

// ---------------------------------------------------------------- generation

// temperature <= 0 selects greedy decoding.
struct Sampler {
  double temperature = 0.0;
};

template <typename T>
TokenId sample_token(std::span<const T> logits, const Sampler& sampler, Rng& rng) {
  if (sampler.temperature <= 0.0) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> w(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp((logits[i] - mx) / sampler.temperature);
    z += w[i];
  }
  double u = uniform01(rng) * z;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(w.size() - 1);
}

struct GenerationRequest {
  std::size_t max_new = 1;
  Sampler sampler{};
  std::uint64_t seed = 0;
  std::optional<TokenId> stop_token;
  const MaskSpec* mask = nullptr;
};

// Autoregressive continuation of several prompts in lock-step. Prompt i draws
// from its own stream derive_seed(seed, i). Generation of a prompt ends at the
// stop token (not emitted), after max_new tokens, or at max_seq.
template <typename T>
std::vector<std::vector<TokenId>> generate_batch(const TransformerWeights<T>& weights,
                                                 std::span<const std::vector<TokenId>> prompts,
                                                 const GenerationRequest& request) {
  if (request.max_new < 1) throw UsageError("generate: max_new must be at least 1");
  const std::size_t max_seq = weights.config().max_seq;
  std::vector<std::vector<TokenId>> seqs(prompts.begin(), prompts.end());
  std::vector<std::vector<TokenId>> out(prompts.size());
  std::vector<Rng> rngs;
  std::vector<std::uint8_t> done(prompts.size(), 0);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].empty()) throw InputError("generate: empty prompt");
    if (prompts[i].size() > max_seq) throw InputError("generate: prompt exceeds max_seq");
    rngs.push_back(make_rng(request.seed, i));
    if (prompts[i].size() == max_seq) done[i] = 1;
  }
  ForwardOptions opts;
  opts.mask = request.mask;
  for (std::size_t step = 0; step < request.max_new; ++step) {
    PackedBatch batch;
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      if (done[i]) continue;
      active.push_back(i);
      batch.add(seqs[i]);
    }
    if (active.empty()) break;
    const auto result = forward(weights, batch, opts);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      const std::size_t last = batch.offsets[a + 1] - 1;
      const TokenId next = sample_token(result.logits.row(last), request.sampler, rngs[i]);
      if (request.stop_token && next == *request.stop_token) {
        done[i] = 1;
        continue;
      }
      out[i].push_back(next);
      seqs[i].push_back(next);
      if (seqs[i].size() >= max_seq) done[i] = 1;
    }
  }
  return out;
}

template <typename T>
std::vector<TokenId> generate(const TransformerWeights<T>& weights, std::span<const TokenId> prompt,
                              const GenerationRequest& request) {
  const std::vector<TokenId> p(prompt.begin(), prompt.end());
  return generate_batch(weights, std::span<const std::vector<TokenId>>(&p, 1), request).front();
}

}  // namespace pslab
