#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dupmn/encoder.hpp"
#include "dupmn/rng.hpp"
#include "dupmn/tensor.hpp"

namespace dupmn {

enum class Variant {
  kDual,
  kUserOnly,
  kProductOnly,
  kTextOnly,  // encoder + head baseline, no memory stage
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kDual:
      return "dupmn";
    case Variant::kUserOnly:
      return "dupmn-u";
    case Variant::kProductOnly:
      return "dupmn-p";
    case Variant::kTextOnly:
      return "text-only";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& name) {
  if (name == "dupmn") return Variant::kDual;
  if (name == "dupmn-u") return Variant::kUserOnly;
  if (name == "dupmn-p") return Variant::kProductOnly;
  if (name == "text-only") return Variant::kTextOnly;
  throw DataError("unknown variant '" + name +
                  "' (expected dupmn, dupmn-u, dupmn-p, or text-only)");
}

/// Fixed n×m external memory; columns are document embeddings, columns past
/// valid_count stay zero.
struct MemoryBank {
  Tensor matrix;
  std::size_t valid_count = 0;

  std::size_t rows() const { return matrix.rows(); }
  std::size_t capacity() const { return matrix.cols(); }
};

/// Builds one memory bank from a context list minus the excluded document.
/// Oversized contexts are uniformly subsampled with the given seed; selected
/// columns are laid out by ascending doc id.
inline MemoryBank build_memory(const std::vector<std::size_t>& context_doc_ids,
                               const EmbeddingMap& embeddings, std::size_t exclude,
                               std::size_t m, std::size_t dim, std::uint64_t seed) {
  if (m < 1) throw DimensionError("build_memory: memory size must be >= 1");
  std::vector<std::size_t> pool;
  pool.reserve(context_doc_ids.size());
  for (const std::size_t id : context_doc_ids) {
    if (id != exclude) pool.push_back(id);
  }
  if (pool.size() > m) {
    Rng rng(seed);
    const std::vector<std::size_t> picks = rng.sample_indices(pool.size(), m);
    std::vector<std::size_t> chosen;
    chosen.reserve(m);
    for (const std::size_t i : picks) chosen.push_back(pool[i]);
    pool = std::move(chosen);
  }
  std::sort(pool.begin(), pool.end());

  std::vector<double> data(dim * m, 0.0);
  for (std::size_t j = 0; j < pool.size(); ++j) {
    const Tensor& emb = embeddings.at(pool[j]);
    if (emb.size() != dim) {
      throw DimensionError("build_memory: embedding of doc " + std::to_string(pool[j]) +
                           " has size " + std::to_string(emb.size()) + ", expected " +
                           std::to_string(dim));
    }
    const auto& v = emb.values();
    for (std::size_t i = 0; i < dim; ++i) data[i * m + j] = v[i];
  }
  MemoryBank bank;
  bank.matrix = Tensor::from({dim, m}, std::move(data));
  bank.valid_count = pool.size();
  return bank;
}

/// One memory hop: scores = d_prevᵀM, attention over them, weighted column sum
/// linearly added back onto d_prev. With zero-padding the padded columns score
/// 0 and join the softmax; the masked form restricts to valid columns.
inline Tensor attention_hop(const Tensor& d_prev, const MemoryBank& bank, bool masked = false) {
  if (d_prev.ndim() != 1 || d_prev.size() != bank.rows()) {
    throw DimensionError("attention_hop: query " + shape_str(d_prev.shape()) + " vs bank " +
                         shape_str(bank.matrix.shape()));
  }
  if (masked && bank.valid_count < bank.capacity()) {
    if (bank.valid_count == 0) return d_prev;
    // The bank is a frozen snapshot, so slicing it to the valid columns makes
    // a fresh leaf; gradients still flow through the query.
    const std::size_t n = bank.rows(), m = bank.capacity(), k = bank.valid_count;
    std::vector<double> sliced(n * k);
    const auto& full = bank.matrix.values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) sliced[i * k + j] = full[i * m + j];
    }
    const Tensor sub = Tensor::from({n, k}, std::move(sliced));
    const Tensor weights = softmax(tmatvec(sub, d_prev));
    return add(d_prev, matvec(sub, weights));
  }
  const Tensor weights = softmax(tmatvec(bank.matrix, d_prev));
  return add(d_prev, matvec(bank.matrix, weights));
}

/// Trainable state of the memory stage: branch fusion matrices W_U/W_P, the
/// two fusion logits behind (w_U, w_P), and the classifier head.
struct DupmnParams {
  Tensor fusion_user;     // n×n, or length-n when diagonal_fusion
  Tensor fusion_product;
  Tensor fusion_logits;   // length 2; softmax yields (w_U, w_P)
  SoftmaxHead classifier;
  std::size_t hops = 1;
  Variant variant = Variant::kDual;
  bool diagonal_fusion = false;

  static DupmnParams init(std::size_t classes, std::size_t dim, std::size_t hops,
                          Variant variant, bool diagonal, Rng& rng) {
    if (hops < 1) throw DimensionError("dupmn: hop count must be >= 1");
    DupmnParams params;
    params.hops = hops;
    params.variant = variant;
    params.diagonal_fusion = diagonal;
    auto near_identity = [&]() {
      if (diagonal) {
        std::vector<double> data(dim);
        for (double& v : data) v = 1.0 + rng.uniform(-0.01, 0.01);
        return Tensor::from({dim}, std::move(data), true);
      }
      std::vector<double> data(dim * dim);
      for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t j = 0; j < dim; ++j) {
          data[i * dim + j] = (i == j ? 1.0 : 0.0) + rng.uniform(-0.01, 0.01);
        }
      }
      return Tensor::from({dim, dim}, std::move(data), true);
    };
    params.fusion_user = near_identity();
    params.fusion_product = near_identity();
    params.fusion_logits = Tensor::zeros({2}, true);  // starts at w_U = w_P = 0.5
    params.classifier = SoftmaxHead::init(classes, dim, rng);
    return params;
  }

  /// Effective branch weights; always sums to 1.
  std::pair<double, double> fusion_weights() const {
    switch (variant) {
      case Variant::kUserOnly:
        return {1.0, 0.0};
      case Variant::kProductOnly:
        return {0.0, 1.0};
      default:
        break;
    }
    NoGradGuard no_grad;
    const Tensor w = softmax(fusion_logits);
    return {w.at(0), w.at(1)};
  }

  std::vector<std::pair<std::string, Tensor*>> named() {
    std::vector<std::pair<std::string, Tensor*>> out{
        {"dupmn.fusion_user", &fusion_user},
        {"dupmn.fusion_product", &fusion_product},
        {"dupmn.fusion_logits", &fusion_logits}};
    for (auto& entry : classifier.named("dupmn.classifier")) out.push_back(entry);
    return out;
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  DupmnParams clone() const {
    DupmnParams copy = *this;
    copy.fusion_user = fusion_user.detached_copy();
    copy.fusion_product = fusion_product.detached_copy();
    copy.fusion_logits = fusion_logits.detached_copy();
    copy.classifier = classifier.clone();
    return copy;
  }
};

namespace detail {

inline Tensor apply_fusion(const Tensor& w, const Tensor& d, bool diagonal) {
  return diagonal ? mul(w, d) : matvec(w, d);
}

}  // namespace detail

/// Full DUPMN forward pass: K hops per branch from the shared input vector,
/// weighted fusion, classifier logits.
inline Tensor dupmn_forward(const Tensor& d0, const MemoryBank& user_bank,
                            const MemoryBank& product_bank, const DupmnParams& params,
                            bool masked = false) {
  if (params.variant == Variant::kTextOnly) {
    throw DataError("dupmn_forward: text-only variant has no memory stage");
  }
  const auto run_branch = [&](const MemoryBank& bank) {
    Tensor d = d0;
    for (std::size_t k = 0; k < params.hops; ++k) d = attention_hop(d, bank, masked);
    return d;
  };

  Tensor fused;
  switch (params.variant) {
    case Variant::kUserOnly:
      fused = detail::apply_fusion(params.fusion_user, run_branch(user_bank),
                                   params.diagonal_fusion);
      break;
    case Variant::kProductOnly:
      fused = detail::apply_fusion(params.fusion_product, run_branch(product_bank),
                                   params.diagonal_fusion);
      break;
    default: {
      const Tensor weights = softmax(params.fusion_logits);
      const Tensor user_side = detail::apply_fusion(params.fusion_user, run_branch(user_bank),
                                                    params.diagonal_fusion);
      const Tensor product_side = detail::apply_fusion(
          params.fusion_product, run_branch(product_bank), params.diagonal_fusion);
      fused = add(smul(pick(weights, 0), user_side), smul(pick(weights, 1), product_side));
      break;
    }
  }
  return params.classifier.logits(fused);
}

inline Tensor predict_proba(const Tensor& logits) { return softmax(logits); }

/// Argmax prediction; ties resolve to the lowest class index.
inline std::size_t predict_class(const Tensor& logits) { return argmax(logits); }

}  // namespace dupmn
