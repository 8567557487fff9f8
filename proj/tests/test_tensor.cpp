#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dupmn/rng.hpp"
#include "dupmn/tensor.hpp"
#include "testing_util.hpp"

using namespace dupmn;
using dupmn::testing::max_fd_rel_error;
using dupmn::testing::random_tensor;
using dupmn::testing::random_values;

TEST_CASE("matmul basics") {
  SECTION("identity passthrough") {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor out = matmul(Tensor::identity(2), a);
    CHECK(out.values() == std::vector<double>{1, 2, 3, 4});
  }
  SECTION("basis row selection") {
    const Tensor a = Tensor::from({1, 2}, {1, 0});
    const Tensor out = matmul(a, Tensor::identity(2));
    CHECK(out.shape() == Shape{1, 2});
    CHECK(out.values() == std::vector<double>{1, 0});
  }
  SECTION("hand-multiplied 2x2 by 2x1") {
    const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    const Tensor b = Tensor::from({2, 1}, {5, 6});
    const Tensor out = matmul(a, b);
    CHECK(out.at(0, 0) == Catch::Approx(17.0));
    CHECK(out.at(1, 0) == Catch::Approx(39.0));
  }
  SECTION("shape mismatch names both shapes") {
    const Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
    const Tensor b = Tensor::from({2, 2}, std::vector<double>(4, 1.0));
    CHECK_THROWS_MATCHES(matmul(a, b), DimensionError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2x3]") &&
                             Catch::Matchers::ContainsSubstring("[2x2]")));
  }
  SECTION("associativity on random matrices") {
    Rng rng(31);
    const Tensor a = random_tensor({3, 4}, rng, false);
    const Tensor b = random_tensor({4, 5}, rng, false);
    const Tensor c = random_tensor({5, 2}, rng, false);
    const Tensor left = matmul(matmul(a, b), c);
    const Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) {
      CHECK(left.values()[i] == Catch::Approx(right.values()[i]).margin(1e-9));
    }
  }
}

TEST_CASE("softmax") {
  SECTION("uniform input") {
    const Tensor p = softmax(Tensor::from({3}, {0, 0, 0}));
    for (std::size_t i = 0; i < 3; ++i) CHECK(p.at(i) == Catch::Approx(1.0 / 3.0));
  }
  SECTION("singleton") {
    CHECK(softmax(Tensor::from({1}, {42.0})).at(0) == 1.0);
  }
  SECTION("two-way odds") {
    const Tensor p = softmax(Tensor::from({2}, {1, 0}));
    CHECK(p.at(0) == Catch::Approx(0.7310585786).margin(1e-5));
    CHECK(p.at(1) == Catch::Approx(0.2689414214).margin(1e-5));
  }
  SECTION("sums to one and shift invariant") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t k = 1 + static_cast<std::size_t>(rng.below(8));
      const auto vals = random_values(k, rng, -30.0, 30.0);
      const Tensor p = softmax(Tensor::from({k}, vals));
      double total = 0.0;
      for (std::size_t i = 0; i < k; ++i) total += p.at(i);
      CHECK(std::abs(total - 1.0) < 1e-12);
      auto shifted = vals;
      const double c = rng.uniform(-100.0, 100.0);
      for (double& v : shifted) v += c;
      const Tensor q = softmax(Tensor::from({k}, shifted));
      for (std::size_t i = 0; i < k; ++i) {
        CHECK(std::abs(p.at(i) - q.at(i)) < 1e-12);
        CHECK(p.at(i) >= 0.0);
      }
    }
  }
  SECTION("stable for large magnitudes") {
    const Tensor p = softmax(Tensor::from({2}, {1000.0, 0.0}));
    CHECK(p.at(0) == Catch::Approx(1.0));
    CHECK(std::isfinite(p.at(1)));
  }
  SECTION("non-finite input rejected") {
    CHECK_THROWS_AS(softmax(Tensor::from({2}, {std::nan(""), 0.0})), NumericError);
  }
}

TEST_CASE("cross entropy") {
  SECTION("uniform logits give log C") {
    const Tensor loss = cross_entropy(Tensor::from({5}, {2, 2, 2, 2, 2}), 3);
    CHECK(loss.value() == Catch::Approx(std::log(5.0)));
  }
  SECTION("saturated correct class") {
    const Tensor loss = cross_entropy(Tensor::from({2}, {1000.0, -1000.0}), 0);
    CHECK(loss.value() == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("hand-computed two-class case") {
    const Tensor loss = cross_entropy(Tensor::from({2}, {1, 0}), 1);
    CHECK(loss.value() == Catch::Approx(1.3132616875).margin(1e-9));
  }
  SECTION("label out of range") {
    CHECK_THROWS_AS(cross_entropy(Tensor::from({3}, {1, 2, 3}), 3), std::out_of_range);
  }
}

namespace {

// Plain scalar re-implementation of the LSTM recurrence, kept independent of
// the Tensor path it checks.
struct ScalarLstm {
  std::vector<std::vector<double>> wi, ui, wf, uf, wg, ug, wo, uo;
  std::vector<double> bi, bf, bg, bo;

  static double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

  std::pair<std::vector<double>, std::vector<double>> step(const std::vector<double>& x,
                                                           const std::vector<double>& h,
                                                           const std::vector<double>& c) const {
    const std::size_t hid = bi.size();
    std::vector<double> hn(hid), cn(hid);
    for (std::size_t r = 0; r < hid; ++r) {
      auto pre = [&](const std::vector<std::vector<double>>& w,
                     const std::vector<std::vector<double>>& u, const std::vector<double>& b) {
        double acc = b[r];
        for (std::size_t j = 0; j < x.size(); ++j) acc += w[r][j] * x[j];
        for (std::size_t j = 0; j < h.size(); ++j) acc += u[r][j] * h[j];
        return acc;
      };
      const double i = sig(pre(wi, ui, bi));
      const double f = sig(pre(wf, uf, bf));
      const double g = std::tanh(pre(wg, ug, bg));
      const double o = sig(pre(wo, uo, bo));
      cn[r] = f * c[r] + i * g;
      hn[r] = o * std::tanh(cn[r]);
    }
    return {hn, cn};
  }
};

LstmParams random_lstm(std::size_t in, std::size_t hid, Rng& rng) {
  auto t = [&](Shape s) { return random_tensor(std::move(s), rng, true, -0.5, 0.5); };
  LstmParams p;
  p.w_in_input = t({hid, in});
  p.w_rec_input = t({hid, hid});
  p.bias_input = t({hid});
  p.w_in_forget = t({hid, in});
  p.w_rec_forget = t({hid, hid});
  p.bias_forget = t({hid});
  p.w_in_cell = t({hid, in});
  p.w_rec_cell = t({hid, hid});
  p.bias_cell = t({hid});
  p.w_in_output = t({hid, in});
  p.w_rec_output = t({hid, hid});
  p.bias_output = t({hid});
  return p;
}

}  // namespace

TEST_CASE("lstm cell") {
  SECTION("all zeros is a fixed point") {
    LstmParams p;
    auto z = [](Shape s) { return Tensor::zeros(std::move(s)); };
    p.w_in_input = z({2, 3});
    p.w_rec_input = z({2, 2});
    p.bias_input = z({2});
    p.w_in_forget = z({2, 3});
    p.w_rec_forget = z({2, 2});
    p.bias_forget = z({2});
    p.w_in_cell = z({2, 3});
    p.w_rec_cell = z({2, 2});
    p.bias_cell = z({2});
    p.w_in_output = z({2, 3});
    p.w_rec_output = z({2, 2});
    p.bias_output = z({2});
    const auto [h, c] = lstm_cell(Tensor::zeros({3}), Tensor::zeros({2}), Tensor::zeros({2}), p);
    CHECK(h.values() == std::vector<double>{0, 0});
    CHECK(c.values() == std::vector<double>{0, 0});
  }

  SECTION("saturated forget gate carries the cell state") {
    Rng rng(5);
    LstmParams p = random_lstm(2, 3, rng);
    // Forget gate pinned open, input gate pinned shut.
    p.w_in_forget = Tensor::zeros({3, 2});
    p.w_rec_forget = Tensor::zeros({3, 3});
    p.bias_forget = Tensor::full({3}, 60.0);
    p.w_in_input = Tensor::zeros({3, 2});
    p.w_rec_input = Tensor::zeros({3, 3});
    p.bias_input = Tensor::full({3}, -60.0);
    const Tensor c_prev = random_tensor({3}, rng, false);
    const auto [h, c] =
        lstm_cell(random_tensor({2}, rng, false), random_tensor({3}, rng, false), c_prev, p);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(c.at(i) == Catch::Approx(c_prev.at(i)).margin(1e-12));
    }
  }

  SECTION("matches the scalar-loop recurrence") {
    Rng rng(11);
    LstmParams p = random_lstm(3, 3, rng);
    ScalarLstm ref;
    auto mat = [&](const Tensor& t) {
      std::vector<std::vector<double>> m(t.rows(), std::vector<double>(t.cols()));
      for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
      return m;
    };
    ref.wi = mat(p.w_in_input);
    ref.ui = mat(p.w_rec_input);
    ref.bi = p.bias_input.values();
    ref.wf = mat(p.w_in_forget);
    ref.uf = mat(p.w_rec_forget);
    ref.bf = p.bias_forget.values();
    ref.wg = mat(p.w_in_cell);
    ref.ug = mat(p.w_rec_cell);
    ref.bg = p.bias_cell.values();
    ref.wo = mat(p.w_in_output);
    ref.uo = mat(p.w_rec_output);
    ref.bo = p.bias_output.values();

    const Tensor x = random_tensor({3}, rng, false);
    const Tensor h0 = random_tensor({3}, rng, false);
    const Tensor c0 = random_tensor({3}, rng, false);
    const auto [h, c] = lstm_cell(x, h0, c0, p);
    const auto [hr, cr] = ref.step(x.values(), h0.values(), c0.values());
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(h.at(i) == Catch::Approx(hr[i]).margin(1e-12));
      CHECK(c.at(i) == Catch::Approx(cr[i]).margin(1e-12));
    }
  }

  SECTION("dimension mismatch") {
    Rng rng(2);
    LstmParams p = random_lstm(2, 3, rng);
    CHECK_THROWS_AS(lstm_cell(Tensor::zeros({5}), Tensor::zeros({3}), Tensor::zeros({3}), p),
                    DimensionError);
  }
}

TEST_CASE("backward basics") {
  SECTION("sum gives all-ones") {
    const Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum(x));
    CHECK(x.grad() == std::vector<double>(6, 1.0));
  }
  SECTION("dot(x, x) gives 2x") {
    const Tensor x = Tensor::from({3}, {1.5, -2.0, 0.25}, true);
    backward(dot(x, x));
    CHECK(x.grad() == std::vector<double>{3.0, -4.0, 0.5});
  }
  SECTION("grads accumulate across uses") {
    const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    backward(add(sum(x), sum(x)));
    CHECK(x.grad() == std::vector<double>{2.0, 2.0});
  }
  SECTION("non-scalar loss rejected") {
    const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(backward(add(x, x)), DimensionError);
  }
  SECTION("no-grad mode builds no graph") {
    NoGradGuard guard;
    const Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    const Tensor y = sum(x);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("finite differences validate every op") {
  Rng rng(17);
  auto check = [&](const char* name,
                   const std::function<Tensor(const std::vector<Tensor>&)>& build,
                   const std::vector<Shape>& shapes) {
    INFO(name);
    CHECK(max_fd_rel_error(build, shapes, rng) < 1e-4);
  };

  check("add+mul", [](const std::vector<Tensor>& v) { return sum(mul(add(v[0], v[1]), v[1])); },
        {{4}, {4}});
  check("scale", [](const std::vector<Tensor>& v) { return sum(scale(v[0], -2.5)); }, {{3, 2}});
  check("smul",
        [](const std::vector<Tensor>& v) { return sum(smul(pick(v[0], 1), v[1])); },
        {{3}, {4}});
  check("matmul",
        [](const std::vector<Tensor>& v) { return sum(matmul(v[0], v[1])); },
        {{3, 4}, {4, 2}});
  check("matvec", [](const std::vector<Tensor>& v) { return sum(matvec(v[0], v[1])); },
        {{3, 4}, {4}});
  check("tmatvec", [](const std::vector<Tensor>& v) { return sum(tmatvec(v[0], v[1])); },
        {{3, 4}, {3}});
  check("dot", [](const std::vector<Tensor>& v) { return dot(v[0], v[1]); }, {{5}, {5}});
  check("tanh", [](const std::vector<Tensor>& v) { return sum(tanh(v[0])); }, {{6}});
  check("sigmoid", [](const std::vector<Tensor>& v) { return sum(sigmoid(v[0])); }, {{6}});
  check("softmax",
        [](const std::vector<Tensor>& v) { return dot(softmax(v[0]), v[1]); },
        {{5}, {5}});
  check("cross_entropy", [](const std::vector<Tensor>& v) { return cross_entropy(v[0], 2); },
        {{5}});
  check("row", [](const std::vector<Tensor>& v) { return sum(tanh(row(v[0], 1))); }, {{3, 4}});
  check("stack",
        [](const std::vector<Tensor>& v) {
          return sum(softmax(stack({pick(v[0], 0), pick(v[0], 2), dot(v[0], v[0])})));
        },
        {{3}});
  check("stack_cols",
        [](const std::vector<Tensor>& v) {
          return sum(matvec(stack_cols({v[0], v[1], v[0]}), v[2]));
        },
        {{4}, {4}, {3}});
  check("lstm composite",
        [](const std::vector<Tensor>& v) {
          LstmParams p;
          p.w_in_input = v[0];
          p.w_rec_input = v[1];
          p.bias_input = v[2];
          p.w_in_forget = v[3];
          p.w_rec_forget = v[4];
          p.bias_forget = v[5];
          p.w_in_cell = v[6];
          p.w_rec_cell = v[7];
          p.bias_cell = v[8];
          p.w_in_output = v[9];
          p.w_rec_output = v[10];
          p.bias_output = v[11];
          const auto [h, c] = lstm_cell(v[12], v[13], v[14], p);
          return add(sum(mul(h, h)), sum(c));
        },
        {{3, 2}, {3, 3}, {3}, {3, 2}, {3, 3}, {3}, {3, 2}, {3, 3}, {3}, {3, 2}, {3, 3}, {3},
         {2}, {3}, {3}});
}

TEST_CASE("repeated forward passes are bit-identical") {
  Rng rng(23);
  const Tensor a = random_tensor({4, 4}, rng, false);
  const Tensor x = random_tensor({4}, rng, false);
  const Tensor first = tanh(matvec(a, softmax(x)));
  const Tensor second = tanh(matvec(a, softmax(x)));
  CHECK(first.values() == second.values());
}

TEST_CASE("slice") {
  const Tensor v = Tensor::from({5}, {1, 2, 3, 4, 5}, true);
  const Tensor s = slice(v, 1, 3);
  CHECK(s.values() == std::vector<double>{2, 3, 4});
  backward(sum(s));
  CHECK(v.grad() == std::vector<double>{0, 1, 1, 1, 0});
  CHECK_THROWS_AS(slice(v, 3, 3), DimensionError);
}

TEST_CASE("fused attention score matches its unfused form") {
  Rng rng(57);
  const Tensor context = dupmn::testing::random_tensor({4}, rng, false);
  const Tensor proj = dupmn::testing::random_tensor({4, 3}, rng, false);
  const Tensor state = dupmn::testing::random_tensor({3}, rng, false);
  const Tensor query = dupmn::testing::random_tensor({4}, rng, false);
  const Tensor fused = attn_score(context, proj, state, query);
  const Tensor unfused = dot(context, tanh(add(matvec(proj, state), query)));
  CHECK(fused.value() == Catch::Approx(unfused.value()).margin(1e-14));
}

TEST_CASE("finite differences validate the fused ops") {
  Rng rng(71);
  CHECK(dupmn::testing::max_fd_rel_error(
            [](const std::vector<Tensor>& v) {
              return attn_score(v[0], v[1], v[2], v[3]);
            },
            {{4}, {4, 3}, {3}, {4}}, rng) < 1e-4);
  CHECK(dupmn::testing::max_fd_rel_error(
            [](const std::vector<Tensor>& v) { return sum(mul(slice(v[0], 1, 4), v[1])); },
            {{6}, {4}}, rng) < 1e-4);
}
