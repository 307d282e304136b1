#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

#include "helpers.hpp"
#include "pslab/autodiff.hpp"
#include "pslab/tensor.hpp"

namespace pslab {
namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(scale * (2.0 * uniform01(rng) - 1.0));
  return t;
}

template <typename T>
using Builder = std::function<ad::Var(ad::Graph<T>&, const std::vector<ad::Var>&)>;

// Reduces a non-scalar output to a scalar with a fixed random weighting.
template <typename T>
ad::Var project_to_scalar(ad::Graph<T>& g, ad::Var out, std::uint64_t seed) {
  Rng rng = make_rng(seed, 5);
  auto w = random_tensor<T>(g.value(out).shape(), rng);
  return ad::sum(g, ad::mul(g, out, g.constant(std::move(w))));
}

// Largest norm-relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
// over the inputs, with central differences of step h.
template <typename T>
double gradient_error(std::vector<Tensor<T>> inputs, const Builder<T>& build, double h) {
  std::vector<Tensor<T>> analytic;
  {
    ad::Graph<T> g;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.parameter(t));
    ad::Var loss = build(g, vars);
    g.backward(loss);
    for (const auto& v : vars) analytic.push_back(g.has_grad(v) ? g.grad(v) : Tensor<T>(g.value(v).shape()));
  }
  auto eval = [&]() {
    ad::Graph<T> g(false);
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.constant_ref(t));
    return static_cast<double>(g.value(build(g, vars))[0]);
  };
  double worst = 0.0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < inputs[p].numel(); ++i) {
      const T saved = inputs[p][i];
      inputs[p][i] = static_cast<T>(saved + h);
      const double up = eval();
      inputs[p][i] = static_cast<T>(saved - h);
      const double down = eval();
      inputs[p][i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = static_cast<double>(analytic[p][i]);
      diff += (a - numeric) * (a - numeric);
      na += a * a;
      nn += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(na, nn)), 1e-12);
    worst = std::max(worst, std::sqrt(diff) / denom);
  }
  return worst;
}

TEST(Tensor, RejectsMismatchedBuffer) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
}

TEST(Tensor, RowAccessAndCast) {
  auto t = Tensor<float>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.row(1)[2], 6.0f);
  EXPECT_EQ(t.cast<double>()(1, 0), 4.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng = make_rng(3);
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {3, 5, 2}, {17, 33, 9}, {64, 7, 65}}) {
    auto a = random_tensor<double>({std::size_t(m), std::size_t(k)}, rng);
    auto b = random_tensor<double>({std::size_t(k), std::size_t(n)}, rng);
    ad::Graph<double> g(false);
    const auto& c = g.value(ad::matmul(g, g.constant(a), g.constant(b)));
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += a(i, p) * b(p, j);
        EXPECT_NEAR(c(i, j), s, 1e-12);
      }
    }
  }
}

TEST(Matmul, FloatMatchesTripleLoopWithinRounding) {
  Rng rng = make_rng(4);
  auto a = random_tensor<float>({20, 40}, rng);
  auto b = random_tensor<float>({40, 30}, rng);
  ad::Graph<float> g(false);
  const auto& c = g.value(ad::matmul(g, g.constant(a), g.constant(b)));
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t j = 0; j < 30; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 40; ++p) s += double(a(i, p)) * b(p, j);
      EXPECT_NEAR(c(i, j), s, 1e-5);
    }
  }
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  ad::Graph<float> g;
  EXPECT_THROW(ad::matmul(g, g.constant(Tensor<float>({2, 3})), g.constant(Tensor<float>({4, 2}))), DimensionError);
}

// x * Phi(x), with Phi from composite Simpson integration of the normal density.
double gelu_by_quadrature(double x) {
  const double lo = -12.0;
  const int steps = 20000;
  const double h = (x - lo) / steps;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); };
  double s = pdf(lo) + pdf(x);
  for (int i = 1; i < steps; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(lo + i * h);
  return x * s * h / 3.0;
}

TEST(Activation, GeluMatchesQuadrature) {
  for (double x : {-6.0, -3.0, -1.5, -0.5, -1e-3, 0.0, 0.25, 1.0, 2.5, 5.0}) {
    EXPECT_NEAR(ad::detail::gelu(x), gelu_by_quadrature(x), 1e-10) << x;
  }
}

TEST(Activation, ReluAndSiluValues) {
  ad::Graph<double> g(false);
  auto x = g.constant(Tensor<double>::vector({-2.0, 0.0, 3.0}));
  const auto& r = g.value(ad::activation(g, x, ActivationKind::kRelu));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[2], 3.0);
  const auto& s = g.value(ad::activation(g, x, ActivationKind::kSilu));
  EXPECT_NEAR(s[0], -2.0 / (1.0 + std::exp(2.0)), 1e-15);
  EXPECT_EQ(s[1], 0.0);
}

template <typename T>
T scalar_like(const ad::Graph<T>&, double x) {
  return static_cast<T>(x);
}

template <typename T>
struct OpCase {
  const char* name;
  std::vector<Shape> shapes;
  Builder<T> build;
};

template <typename T>
std::vector<OpCase<T>> op_cases() {
  std::vector<OpCase<T>> cases;
  cases.push_back({"matmul", {{4, 5}, {5, 3}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::matmul(g, v[0], v[1]), 1);
                   }});
  cases.push_back({"add", {{3, 4}, {3, 4}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::add(g, v[0], v[1]), 2);
                   }});
  cases.push_back({"add_row", {{3, 4}, {4}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::add_row(g, v[0], v[1]), 3);
                   }});
  cases.push_back({"mul", {{3, 4}, {3, 4}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::mul(g, v[0], v[1]), 4);
                   }});
  cases.push_back({"scale", {{2, 5}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::scale(g, v[0], scalar_like(g, -1.7)), 5);
                   }});
  cases.push_back({"gelu", {{4, 6}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::activation(g, v[0], ActivationKind::kGelu), 6);
                   }});
  cases.push_back({"silu", {{4, 6}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::activation(g, v[0], ActivationKind::kSilu), 7);
                   }});
  cases.push_back({"layer_norm", {{3, 8}, {8}, {8}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::layer_norm(g, v[0], v[1], v[2]), 8);
                   }});
  cases.push_back({"embedding_repeated_ids", {{6, 4}}, [](auto& g, const auto& v) {
                     const std::vector<std::int32_t> ids{2, 0, 2, 5, 2};
                     return project_to_scalar(g, ad::embedding(g, v[0], ids), 9);
                   }});
  cases.push_back({"zero_columns", {{3, 6}}, [](auto& g, const auto& v) {
                     const std::vector<std::size_t> cols{1, 4};
                     return project_to_scalar(g, ad::zero_columns(g, v[0], cols), 10);
                   }});
  cases.push_back({"causal_attention_packed", {{7, 6}, {7, 6}, {7, 6}}, [](auto& g, const auto& v) {
                     const std::vector<std::size_t> offsets{0, 3, 7};
                     return project_to_scalar(g, ad::causal_attention(g, v[0], v[1], v[2], offsets, 2), 11);
                   }});
  cases.push_back({"cross_entropy_with_ignored_rows", {{4, 5}}, [](auto& g, const auto& v) {
                     const std::vector<std::int32_t> targets{3, ad::kIgnoreTarget, 0, 4};
                     return ad::cross_entropy(g, v[0], targets);
                   }});
  cases.push_back({"reused_input", {{3, 3}}, [](auto& g, const auto& v) {
                     return project_to_scalar(g, ad::mul(g, ad::matmul(g, v[0], v[0]), v[0]), 12);
                   }});
  return cases;
}

TEST(Gradients, EveryOpMatchesCentralDifferencesInDouble) {
  for (const auto& c : op_cases<double>()) {
    Rng rng = make_rng(17);
    std::vector<Tensor<double>> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor<double>(s, rng));
    EXPECT_LT(gradient_error(inputs, c.build, 1e-6), 1e-7) << c.name;
  }
}

// Float analytic gradients against central differences of the same op taken
// in double at the float-rounded inputs; norm-relative error.
TEST(Gradients, FloatOpsAgreeWithDoubleDifferences) {
  const auto fcases = op_cases<float>();
  const auto dcases = op_cases<double>();
  for (std::size_t ci = 0; ci < fcases.size(); ++ci) {
    Rng rng = make_rng(18);
    std::vector<Tensor<float>> finputs;
    for (const auto& s : fcases[ci].shapes) finputs.push_back(random_tensor<float>(s, rng));
    ad::Graph<float> g;
    std::vector<ad::Var> vars;
    for (const auto& t : finputs) vars.push_back(g.parameter(t));
    g.backward(fcases[ci].build(g, vars));

    std::vector<Tensor<double>> dinputs;
    for (const auto& t : finputs) dinputs.push_back(t.cast<double>());
    auto eval = [&]() {
      ad::Graph<double> gd(false);
      std::vector<ad::Var> dv;
      for (const auto& t : dinputs) dv.push_back(gd.constant_ref(t));
      return gd.value(dcases[ci].build(gd, dv))[0];
    };
    for (std::size_t p = 0; p < dinputs.size(); ++p) {
      double diff = 0, norm = 0;
      for (std::size_t i = 0; i < dinputs[p].numel(); ++i) {
        const double saved = dinputs[p][i];
        dinputs[p][i] = saved + 1e-6;
        const double up = eval();
        dinputs[p][i] = saved - 1e-6;
        const double down = eval();
        dinputs[p][i] = saved;
        const double numeric = (up - down) / 2e-6;
        const double a = g.has_grad(vars[p]) ? g.grad(vars[p])[i] : 0.0;
        diff += (a - numeric) * (a - numeric);
        norm += numeric * numeric;
      }
      EXPECT_LT(std::sqrt(diff) / std::max(std::sqrt(norm), 1e-12), 1e-4) << fcases[ci].name << " input " << p;
    }
  }
}

TEST(Graph, BackwardNeedsScalarLoss) {
  ad::Graph<double> g;
  auto x = g.parameter(Tensor<double>({2, 2}, 1.0));
  EXPECT_THROW(g.backward(ad::scale(g, x, 2.0)), UsageError);
}

TEST(Graph, ConstantsReceiveNoGradient) {
  ad::Graph<double> g;
  Tensor<double> w({2, 2}, 0.5);
  auto x = g.parameter(w);
  auto c = g.constant(Tensor<double>({2, 2}, 2.0));
  g.backward(ad::sum(g, ad::mul(g, x, c)));
  EXPECT_TRUE(g.has_grad(x));
  EXPECT_FALSE(g.has_grad(c));
  EXPECT_EQ(g.grad(x)[3], 2.0);
}

TEST(Graph, DisabledGraphRejectsBackward) {
  ad::Graph<double> g(false);
  Tensor<double> w({1}, 1.0);
  auto x = g.parameter(w);
  EXPECT_FALSE(g.requires_grad(x));
  EXPECT_THROW(g.backward(ad::sum(g, x)), UsageError);
}

TEST(LayerNorm, NormalizesRows) {
  Rng rng = make_rng(8);
  auto x = random_tensor<double>({4, 16}, rng, 5.0);
  ad::Graph<double> g(false);
  const auto& y = g.value(ad::layer_norm(g, g.constant(x), g.constant(Tensor<double>({16}, 1.0)),
                                         g.constant(Tensor<double>({16}, 0.0))));
  for (std::size_t r = 0; r < 4; ++r) {
    double mu = 0, var = 0;
    for (double v : y.row(r)) mu += v;
    mu /= 16;
    for (double v : y.row(r)) var += (v - mu) * (v - mu);
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var / 16, 1.0, 1e-4);
  }
}

TEST(Attention, SequencesInAPackDoNotInteract) {
  Rng rng = make_rng(9);
  auto q = random_tensor<double>({5, 4}, rng), k = random_tensor<double>({5, 4}, rng), v = random_tensor<double>({5, 4}, rng);
  ad::Graph<double> g(false);
  const std::vector<std::size_t> packed{0, 2, 5};
  const auto& both = g.value(ad::causal_attention(g, g.constant(q), g.constant(k), g.constant(v), packed, 2));
  // Second sequence alone.
  auto slice = [](const Tensor<double>& t) {
    Tensor<double> s({3, 4});
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) s(r, c) = t(r + 2, c);
    return s;
  };
  const std::vector<std::size_t> single{0, 3};
  const auto& alone = g.value(ad::causal_attention(g, g.constant(slice(q)), g.constant(slice(k)), g.constant(slice(v)), single, 2));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(both(r + 2, c), alone(r, c));
  // First position attends only to itself.
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(both(0, c), v(0, c), 1e-15);
}

TEST(Attention, RejectsIndivisibleHeads) {
  ad::Graph<double> g(false);
  Tensor<double> t({3, 6});
  const std::vector<std::size_t> offs{0, 3};
  EXPECT_THROW(ad::causal_attention(g, g.constant(t), g.constant(t), g.constant(t), offs, 4), DimensionError);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  ad::Graph<double> g(false);
  const std::vector<std::int32_t> targets{1, 2};
  const double loss = g.value(ad::cross_entropy(g, g.constant(Tensor<double>({2, 8})), targets))[0];
  EXPECT_NEAR(loss, std::log(8.0), 1e-12);
}

}  // namespace
}  // namespace pslab
