#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "dupmn/memnet.hpp"
#include "testing_util.hpp"

using namespace dupmn;
using dupmn::testing::max_fd_rel_error_params;
using dupmn::testing::random_tensor;
using dupmn::testing::random_values;

namespace {

EmbeddingMap make_embeddings(std::size_t count, std::size_t dim, Rng& rng) {
  EmbeddingMap map;
  for (std::size_t id = 0; id < count; ++id) {
    map.emplace(id, Tensor::from({dim}, random_values(dim, rng)));
  }
  return map;
}

// Plain-loop recomputation of hops, fusion, and the classifier.
std::vector<double> scalar_forward(const std::vector<double>& d0, const MemoryBank& user_bank,
                                   const MemoryBank& product_bank, const DupmnParams& params) {
  const auto hop_chain = [&](const MemoryBank& bank) {
    std::vector<double> d = d0;
    const std::size_t n = bank.rows(), m = bank.capacity();
    const auto& mat = bank.matrix.values();
    for (std::size_t k = 0; k < params.hops; ++k) {
      std::vector<double> scores(m, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) scores[j] += d[i] * mat[i * m + j];
      }
      double max = scores[0];
      for (const double s : scores) max = std::max(max, s);
      double denom = 0.0;
      for (double& s : scores) {
        s = std::exp(s - max);
        denom += s;
      }
      for (double& s : scores) s /= denom;
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j) acc += scores[j] * mat[i * m + j];
        d[i] += acc;
      }
    }
    return d;
  };

  const auto du = hop_chain(user_bank);
  const auto dp = hop_chain(product_bank);
  const auto [wu, wp] = params.fusion_weights();
  const std::size_t n = d0.size();
  std::vector<double> fused(n, 0.0);
  const auto& wu_mat = params.fusion_user.values();
  const auto& wp_mat = params.fusion_product.values();
  for (std::size_t i = 0; i < n; ++i) {
    double user_side = 0.0, product_side = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      user_side += wu_mat[i * n + j] * du[j];
      product_side += wp_mat[i * n + j] * dp[j];
    }
    fused[i] = wu * user_side + wp * product_side;
  }
  const std::size_t classes = params.classifier.bias.size();
  std::vector<double> logits(classes);
  const auto& cw = params.classifier.weight.values();
  for (std::size_t c = 0; c < classes; ++c) {
    double acc = params.classifier.bias.at(c);
    for (std::size_t j = 0; j < n; ++j) acc += cw[c * n + j] * fused[j];
    logits[c] = acc;
  }
  return logits;
}

}  // namespace

TEST_CASE("build_memory") {
  Rng rng(3);
  const EmbeddingMap embeddings = make_embeddings(300, 4, rng);

  SECTION("context holding only the excluded doc yields a zero bank") {
    const MemoryBank bank = build_memory({7}, embeddings, 7, 5, 4, 11);
    CHECK(bank.valid_count == 0);
    for (const double v : bank.matrix.values()) CHECK(v == 0.0);
  }
  SECTION("small context zero-pads and orders columns by doc id") {
    const MemoryBank bank = build_memory({9, 2, 5}, embeddings, 99, 5, 4, 11);
    CHECK(bank.valid_count == 3);
    CHECK(bank.capacity() == 5);
    const std::vector<std::size_t> expect{2, 5, 9};
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(bank.matrix.at(i, j) == embeddings.at(expect[j]).at(i));
      }
    }
    for (std::size_t j = 3; j < 5; ++j) {
      for (std::size_t i = 0; i < 4; ++i) CHECK(bank.matrix.at(i, j) == 0.0);
    }
  }
  SECTION("oversized context subsamples deterministically") {
    std::vector<std::size_t> context(200);
    for (std::size_t i = 0; i < 200; ++i) context[i] = i;
    const MemoryBank a = build_memory(context, embeddings, 500, 100, 4, 77);
    const MemoryBank b = build_memory(context, embeddings, 500, 100, 4, 77);
    CHECK(a.valid_count == 100);
    CHECK(a.matrix.values() == b.matrix.values());
    const MemoryBank c = build_memory(context, embeddings, 500, 100, 4, 78);
    CHECK(a.matrix.values() != c.matrix.values());
  }
  SECTION("self-exclusion removes the target doc") {
    const MemoryBank bank = build_memory({1, 2, 3}, embeddings, 2, 3, 4, 5);
    CHECK(bank.valid_count == 2);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(bank.matrix.at(i, 0) == embeddings.at(1).at(i));
      CHECK(bank.matrix.at(i, 1) == embeddings.at(3).at(i));
    }
  }
}

TEST_CASE("attention_hop") {
  SECTION("all-zero bank is the identity") {
    MemoryBank bank;
    bank.matrix = Tensor::zeros({3, 4});
    bank.valid_count = 0;
    const Tensor d = Tensor::from({3}, {0.3, -0.7, 1.1});
    const Tensor out = attention_hop(d, bank);
    CHECK(out.values() == d.values());  // exact
  }
  SECTION("single column adds itself") {
    MemoryBank bank;
    bank.matrix = Tensor::from({2, 1}, {0.5, -0.25});
    bank.valid_count = 1;
    const Tensor out = attention_hop(Tensor::from({2}, {1.0, 2.0}), bank);
    CHECK(out.at(0) == 1.5);
    CHECK(out.at(1) == 1.75);
  }
  SECTION("hand-computed two-column case") {
    MemoryBank bank;
    bank.matrix = Tensor::from({2, 2}, {1, 0, 0, 1});  // columns (1,0) and (0,1)
    bank.valid_count = 2;
    const Tensor out = attention_hop(Tensor::from({2}, {1, 0}), bank);
    CHECK(out.at(0) == Catch::Approx(1.73106).margin(1e-5));
    CHECK(out.at(1) == Catch::Approx(0.26894).margin(1e-5));
  }
  SECTION("permuting valid columns leaves the output unchanged") {
    Rng rng(9);
    const std::size_t n = 4, m = 5;
    const auto vals = random_values(n * m, rng);
    MemoryBank bank;
    bank.matrix = Tensor::from({n, m}, vals);
    bank.valid_count = m;
    const Tensor d = random_tensor({n}, rng, false);
    const Tensor base = attention_hop(d, bank);

    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> permuted(n * m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) permuted[i * m + j] = vals[i * m + perm[j]];
    }
    MemoryBank shuffled;
    shuffled.matrix = Tensor::from({n, m}, permuted);
    shuffled.valid_count = m;
    const Tensor out = attention_hop(d, shuffled);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(out.at(i) - base.at(i)) < 1e-12);
    }
  }
  SECTION("masked hop ignores padded columns") {
    Rng rng(21);
    const Tensor d = random_tensor({3}, rng, false);
    // Bank with 2 valid columns padded out to 4.
    const std::vector<double> c0 = random_values(3, rng);
    const std::vector<double> c1 = random_values(3, rng);
    std::vector<double> padded(3 * 4, 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
      padded[i * 4 + 0] = c0[i];
      padded[i * 4 + 1] = c1[i];
    }
    MemoryBank bank;
    bank.matrix = Tensor::from({3, 4}, padded);
    bank.valid_count = 2;

    std::vector<double> tight(3 * 2);
    for (std::size_t i = 0; i < 3; ++i) {
      tight[i * 2 + 0] = c0[i];
      tight[i * 2 + 1] = c1[i];
    }
    MemoryBank exact;
    exact.matrix = Tensor::from({3, 2}, tight);
    exact.valid_count = 2;

    const Tensor masked_out = attention_hop(d, bank, /*masked=*/true);
    const Tensor reference = attention_hop(d, exact);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(masked_out.at(i) == Catch::Approx(reference.at(i)).margin(1e-15));
    }
    // Unmasked, the zero columns join the softmax and shift the read.
    const Tensor unmasked_out = attention_hop(d, bank, /*masked=*/false);
    double diff = 0.0;
    for (std::size_t i = 0; i < 3; ++i) diff += std::abs(unmasked_out.at(i) - reference.at(i));
    CHECK(diff > 1e-9);
    // Masked hop over an empty bank is the identity.
    MemoryBank empty;
    empty.matrix = Tensor::zeros({3, 4});
    empty.valid_count = 0;
    CHECK(attention_hop(d, empty, true).values() == d.values());
  }
}

TEST_CASE("dupmn_forward") {
  Rng rng(41);

  SECTION("zero banks with identity fusion collapse to the input") {
    const std::size_t n = 3, classes = 4;
    DupmnParams params = DupmnParams::init(classes, n, 1, Variant::kDual, false, rng);
    params.fusion_user = Tensor::from({n, n}, Tensor::identity(n).values(), true);
    params.fusion_product = Tensor::from({n, n}, Tensor::identity(n).values(), true);
    MemoryBank zero;
    zero.matrix = Tensor::zeros({n, 2});
    zero.valid_count = 0;
    const Tensor d0 = random_tensor({n}, rng, false);
    const Tensor logits = dupmn_forward(d0, zero, zero, params);
    const Tensor direct = params.classifier.logits(d0);
    CHECK(logits.values() == direct.values());  // w_U + w_P = 1 keeps d0 exact
  }

  SECTION("pinned fusion logits reproduce the single-branch variants") {
    const std::size_t n = 4, classes = 3;
    const EmbeddingMap embeddings = make_embeddings(20, n, rng);
    std::vector<std::size_t> user_ctx{1, 2, 3, 4, 5};
    std::vector<std::size_t> product_ctx{6, 7, 8};
    const MemoryBank user_bank = build_memory(user_ctx, embeddings, 99, 3, n, 1);
    const MemoryBank product_bank = build_memory(product_ctx, embeddings, 99, 3, n, 2);
    const Tensor d0 = random_tensor({n}, rng, false);

    DupmnParams dual = DupmnParams::init(classes, n, 2, Variant::kDual, false, rng);
    DupmnParams user_only = dual.clone();
    user_only.variant = Variant::kUserOnly;
    DupmnParams product_only = dual.clone();
    product_only.variant = Variant::kProductOnly;

    dual.fusion_logits = Tensor::from({2}, {12.0, -12.0}, true);
    const Tensor pinned_user = dupmn_forward(d0, user_bank, product_bank, dual);
    const Tensor branch_user = dupmn_forward(d0, user_bank, product_bank, user_only);
    for (std::size_t c = 0; c < classes; ++c) {
      CHECK(pinned_user.at(c) == Catch::Approx(branch_user.at(c)).margin(1e-9));
    }

    dual.fusion_logits = Tensor::from({2}, {-12.0, 12.0}, true);
    const Tensor pinned_product = dupmn_forward(d0, user_bank, product_bank, dual);
    const Tensor branch_product = dupmn_forward(d0, user_bank, product_bank, product_only);
    for (std::size_t c = 0; c < classes; ++c) {
      CHECK(pinned_product.at(c) == Catch::Approx(branch_product.at(c)).margin(1e-9));
    }
  }

  SECTION("fusion weights always sum to one") {
    Rng wrng(5);
    for (int trial = 0; trial < 50; ++trial) {
      DupmnParams params = DupmnParams::init(3, 2, 1, Variant::kDual, false, wrng);
      params.fusion_logits =
          Tensor::from({2}, {wrng.uniform(-40.0, 40.0), wrng.uniform(-40.0, 40.0)}, true);
      const auto [wu, wp] = params.fusion_weights();
      CHECK(std::abs(wu + wp - 1.0) < 1e-12);
      CHECK(wu > 0.0);
      CHECK(wp > 0.0);
    }
  }

  SECTION("matches the scalar recomputation on a random instance") {
    const std::size_t n = 4, classes = 5;
    const EmbeddingMap embeddings = make_embeddings(30, n, rng);
    std::vector<std::size_t> user_ctx{0, 1, 2, 3, 4, 5, 6};
    std::vector<std::size_t> product_ctx{10, 11, 12};
    const MemoryBank user_bank = build_memory(user_ctx, embeddings, 3, 5, n, 7);
    const MemoryBank product_bank = build_memory(product_ctx, embeddings, 3, 5, n, 8);
    DupmnParams params = DupmnParams::init(classes, n, 2, Variant::kDual, false, rng);
    params.fusion_logits = Tensor::from({2}, {0.3, -0.2}, true);
    const Tensor d0 = random_tensor({n}, rng, false);

    const Tensor logits = dupmn_forward(d0, user_bank, product_bank, params);
    const auto oracle = scalar_forward(d0.values(), user_bank, product_bank, params);
    REQUIRE(logits.size() == oracle.size());
    for (std::size_t c = 0; c < classes; ++c) {
      CHECK(logits.at(c) == Catch::Approx(oracle[c]).margin(1e-12));
    }
  }

  SECTION("diagonal fusion variant") {
    const std::size_t n = 3, classes = 2;
    DupmnParams params = DupmnParams::init(classes, n, 1, Variant::kDual, true, rng);
    MemoryBank zero;
    zero.matrix = Tensor::zeros({n, 1});
    zero.valid_count = 0;
    const Tensor d0 = random_tensor({n}, rng, false);
    const Tensor logits = dupmn_forward(d0, zero, zero, params);
    // Equivalent dense formulation: diag(w) d0
    DupmnParams dense = params.clone();
    dense.diagonal_fusion = false;
    auto densify = [&](const Tensor& diag) {
      std::vector<double> m(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) m[i * n + i] = diag.at(i);
      return Tensor::from({n, n}, std::move(m), true);
    };
    dense.fusion_user = densify(params.fusion_user);
    dense.fusion_product = densify(params.fusion_product);
    const Tensor dense_logits = dupmn_forward(d0, zero, zero, dense);
    for (std::size_t c = 0; c < classes; ++c) {
      CHECK(logits.at(c) == Catch::Approx(dense_logits.at(c)).margin(1e-12));
    }
  }

  SECTION("argmax tie-break picks the lowest class") {
    CHECK(predict_class(Tensor::from({4}, {0.5, 0.5, 0.5, 0.5})) == 0);
    CHECK(predict_class(Tensor::from({3}, {0.1, 0.7, 0.7})) == 1);
  }

  SECTION("full-model gradient check (n=4, m=3, C=3, K=2)") {
    const std::size_t n = 4, m = 3, classes = 3;
    const EmbeddingMap embeddings = make_embeddings(10, n, rng);
    const MemoryBank user_bank = build_memory({0, 1, 2, 3}, embeddings, 0, m, n, 3);
    const MemoryBank product_bank = build_memory({4, 5}, embeddings, 0, m, n, 4);
    DupmnParams params = DupmnParams::init(classes, n, 2, Variant::kDual, false, rng);
    Tensor d0 = random_tensor({n}, rng, true);

    std::vector<Tensor*> trainables = params.tensors();
    trainables.push_back(&d0);
    const auto build = [&]() {
      return cross_entropy(dupmn_forward(d0, user_bank, product_bank, params), 1);
    };
    CHECK(max_fd_rel_error_params(build, trainables) < 1e-4);
  }
}

TEST_CASE("predict_proba") {
  SECTION("uniform logits") {
    const Tensor p = predict_proba(Tensor::from({5}, {2, 2, 2, 2, 2}));
    for (std::size_t i = 0; i < 5; ++i) CHECK(p.at(i) == Catch::Approx(0.2));
  }
  SECTION("saturated logits stay finite") {
    const Tensor p = predict_proba(Tensor::from({2}, {1000.0, 0.0}));
    CHECK(p.at(0) == Catch::Approx(1.0));
    CHECK(p.at(1) == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("frozen three-way case") {
    const Tensor p = predict_proba(Tensor::from({3}, {1, 0, -1}));
    CHECK(p.at(0) == Catch::Approx(0.66524).margin(1e-5));
    CHECK(p.at(1) == Catch::Approx(0.24473).margin(1e-5));
    CHECK(p.at(2) == Catch::Approx(0.09003).margin(1e-5));
  }
}
