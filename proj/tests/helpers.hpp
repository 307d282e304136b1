#pragma once

// Shared fixtures and independent oracles for the test suite.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pslab/corpus.hpp"
#include "pslab/finetune.hpp"
#include "pslab/model.hpp"
#include "pslab/random.hpp"

namespace pslab::testing {

inline ModelConfig tiny_model(std::size_t vocab, std::size_t layers = 2, std::size_t d = 16, std::size_t n = 32,
                              std::size_t heads = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.d_mlp = n;
  c.n_heads = heads;
  c.vocab_size = vocab;
  c.max_seq = 32;
  return c;
}

inline CorpusConfig small_corpus_config(std::uint64_t seed = 7) {
  CorpusConfig c;
  c.seed = seed;
  c.n_concepts = 18;
  c.n_new_concepts = 3;
  return c;
}

inline std::vector<TokenId> random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  std::vector<TokenId> out(len);
  for (auto& t : out) t = static_cast<TokenId>(uniform_index(rng, vocab));
  return out;
}

// Weights with larger-than-default entries so every sublayer matters.
template <typename T>
TransformerWeights<T> random_weights(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.3) {
  TransformerWeights<T> w(cfg);
  Rng rng = make_rng(seed, 99);
  for (auto& p : w.parameters()) {
    for (auto& v : p.value.data()) v = static_cast<T>(scale * (2.0 * uniform01(rng) - 1.0));
  }
  return w;
}

// Straight-line double-precision transformer written independently of the
// graph engine. MLP masking is applied the other way round: the full MLP
// output is formed first, then each masked value vector's contribution
// m_j * v_j is subtracted.
template <typename T>
std::vector<std::vector<double>> reference_logits(const TransformerWeights<T>& w, const std::vector<TokenId>& tokens,
                                                  const MaskSpec* mask = nullptr) {
  const ModelConfig& c = w.config();
  const std::size_t len = tokens.size(), d = c.d_model, n = c.d_mlp, H = c.n_heads, dh = d / H;
  auto at = [&](std::size_t slot, std::size_t r, std::size_t col) {
    const auto& t = w.at(slot);
    return static_cast<double>(t[r * t.cols() + col]);
  };
  auto vec = [&](std::size_t slot, std::size_t i) { return static_cast<double>(w.at(slot)[i]); };
  using Mat = std::vector<std::vector<double>>;
  auto layer_norm = [&](const Mat& x, std::size_t gain, std::size_t bias) {
    Mat out(x.size(), std::vector<double>(d));
    for (std::size_t r = 0; r < x.size(); ++r) {
      double mu = 0, var = 0;
      for (double v : x[r]) mu += v;
      mu /= static_cast<double>(d);
      for (double v : x[r]) var += (v - mu) * (v - mu);
      var /= static_cast<double>(d);
      for (std::size_t k = 0; k < d; ++k) out[r][k] = (x[r][k] - mu) / std::sqrt(var + 1e-5) * vec(gain, k) + vec(bias, k);
    }
    return out;
  };
  auto project = [&](const Mat& x, std::size_t slot, std::size_t cols) {
    Mat out(x.size(), std::vector<double>(cols, 0.0));
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t k = 0; k < x[r].size(); ++k)
        for (std::size_t j = 0; j < cols; ++j) out[r][j] += x[r][k] * at(slot, k, j);
    return out;
  };
  auto act = [&](double v) {
    switch (c.activation) {
      case ActivationKind::kRelu: return v > 0 ? v : 0.0;
      case ActivationKind::kGelu: return 0.5 * v * std::erfc(-v / std::sqrt(2.0));
      case ActivationKind::kSilu: return v / (1.0 + std::exp(-v));
    }
    return v;
  };

  Mat x(len, std::vector<double>(d));
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t k = 0; k < d; ++k)
      x[i][k] = at(w.tok_emb_slot(), static_cast<std::size_t>(tokens[i]), k) + at(w.pos_emb_slot(), i, k);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& s = w.layer(l);
    const Mat a_in = layer_norm(x, s.ln1_gain, s.ln1_bias);
    const Mat q = project(a_in, s.wq, d), kk = project(a_in, s.wk, d), v = project(a_in, s.wv, d);
    Mat att(len, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> sc(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * kk[j][h * dh + e];
          sc[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, sc[j]);
        }
        double z = 0;
        for (auto& e : sc) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t e = 0; e < dh; ++e) att[i][h * dh + e] += sc[j] / z * v[j][h * dh + e];
      }
    }
    const Mat attn_out = project(att, s.wo, d);
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t k = 0; k < d; ++k) x[i][k] += attn_out[i][k];

    const Mat m_in = layer_norm(x, s.ln2_gain, s.ln2_bias);
    const Mat keys = project(m_in, s.w_key, n);
    Mat coeff(len, std::vector<double>(n));
    if (c.mlp_style == MlpStyle::kGated) {
      const Mat gate = project(m_in, *s.w_gate, n);
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < n; ++j) coeff[i][j] = act(gate[i][j]) * keys[i][j];
    } else {
      for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < n; ++j) coeff[i][j] = act(keys[i][j]);
    }
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<double> out(d, 0.0);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < d; ++k) out[k] += coeff[i][j] * at(s.w_value, j, k);
      if (mask != nullptr) {
        for (std::size_t j : mask->layers[l])
          for (std::size_t k = 0; k < d; ++k) out[k] -= coeff[i][j] * at(s.w_value, j, k);
      }
      for (std::size_t k = 0; k < d; ++k) x[i][k] += out[k];
    }
  }
  const Mat fin = layer_norm(x, w.ln_f_gain_slot(), w.ln_f_bias_slot());
  return project(fin, w.head_slot(), c.vocab_size);
}

// A small corpus and a model trained on it briefly; built once per process.
struct TrainedFixture {
  Corpus corpus;
  TransformerWeights<float> weights;
};

inline const TrainedFixture& trained_small() {
  static const TrainedFixture f = [] {
    TrainedFixture out{generate_corpus(small_corpus_config()), {}};
    auto cfg = tiny_model(out.corpus.vocab.size(), 2, 32, 64, 2);
    cfg.max_seq = 64;
    TrainConfig t;
    t.steps = 300;
    t.batch_size = 16;
    t.lr = 3e-3;
    t.seed = 5;
    out.weights = pretrain<float>(cfg, out.corpus, t);
    return out;
  }();
  return f;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("pslab_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace pslab::testing
