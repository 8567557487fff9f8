#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dupmn/corpus.hpp"
#include "dupmn/encoder.hpp"
#include "dupmn/eval.hpp"
#include "dupmn/memnet.hpp"
#include "dupmn/rng.hpp"
#include "dupmn/tensor.hpp"

namespace dupmn {

class TrainingDivergence : public NumericError {
 public:
  explicit TrainingDivergence(const std::string& what) : NumericError(what) {}
};

struct TrainConfig {
  std::uint64_t seed = 7;
  double learning_rate = 0.05;
  double clip_norm = 5.0;           // <= 0 disables clipping
  std::size_t batch_size = 1;       // per-document graphs; recorded in manifests
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  std::size_t hops = 1;             // K
  std::size_t memory_size = 100;    // m
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 64;
  std::size_t doc_dim = 64;
  std::size_t min_count = 2;
  Variant variant = Variant::kDual;
  bool masked_attention = false;
  bool diagonal_fusion = false;
  bool zero_banks = false;            // stage-2 diagnostic: all-zero memories
  bool lock_fusion_identity = false;  // stage-2 diagnostic: frozen identity fusion
  int jobs = 1;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_accuracy = 0.0;
  double dev_rmse = 0.0;
  double wall_seconds = 0.0;

  std::string text_line() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %3zu  loss %.6f  dev_acc %.4f  dev_rmse %.4f  %.2fs",
                  epoch, train_loss, dev_accuracy, dev_rmse, wall_seconds);
    return buf;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"epoch", epoch},
                          {"train_loss", train_loss},
                          {"dev_accuracy", dev_accuracy},
                          {"dev_rmse", dev_rmse},
                          {"wall_seconds", wall_seconds}};
  }
};

/// Clipped SGD update over a parameter set: global-norm clipping, then
/// p -= lr * g, then grads are zeroed.
inline void sgd_step(const std::vector<Tensor*>& params, double learning_rate,
                     double clip_norm) {
  double sq_norm = 0.0;
  for (Tensor* p : params) {
    if (!p->has_grad()) continue;
    for (const double g : p->grad()) {
      if (!std::isfinite(g)) {
        throw TrainingDivergence("sgd_step: non-finite gradient encountered");
      }
      sq_norm += g * g;
    }
  }
  const double norm = std::sqrt(sq_norm);
  double factor = 1.0;
  if (clip_norm > 0.0 && norm > clip_norm) factor = clip_norm / norm;
  const double step = learning_rate * factor;
  for (Tensor* p : params) {
    if (!p->has_grad()) continue;
    auto& data = p->mutable_values();
    const auto& grad = p->grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] -= step * grad[i];
    p->zero_grad();
  }
}

namespace detail {

struct EarlyStopper {
  double best = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t stale = 0;

  /// Returns true when this epoch improved the best dev score.
  bool observe(std::size_t epoch, double dev_score) {
    if (dev_score > best) {
      best = dev_score;
      best_epoch = epoch;
      stale = 0;
      return true;
    }
    ++stale;
    return false;
  }

  bool should_stop(std::size_t patience) const { return stale >= patience; }
};

inline void check_finite_loss(double loss, std::size_t epoch, std::size_t doc_id) {
  if (!std::isfinite(loss)) {
    throw TrainingDivergence("training diverged: non-finite loss at epoch " +
                             std::to_string(epoch) + ", doc " + std::to_string(doc_id));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: encoder pretraining with a softmax head.

struct Stage1Model {
  EncoderParams encoder;
  SoftmaxHead head;

  Stage1Model clone() const { return {encoder.clone(), head.clone()}; }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out = encoder.tensors();
    out.push_back(&head.weight);
    out.push_back(&head.bias);
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> named() {
    auto out = encoder.named();
    for (auto& entry : head.named("head")) out.push_back(entry);
    return out;
  }
};

struct Stage1Result {
  Stage1Model model;
  double best_dev_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
};

inline Stage1Model stage1_init(std::size_t vocab_size, std::size_t num_users,
                               std::size_t num_products, int num_classes,
                               const TrainConfig& cfg) {
  Rng rng = substream(cfg.seed, "stage1-init");
  Stage1Model model;
  model.encoder = EncoderParams::init(vocab_size, num_users, num_products, cfg.embed_dim,
                                      cfg.hidden_dim, cfg.doc_dim, rng);
  model.head = SoftmaxHead::init(static_cast<std::size_t>(num_classes), cfg.doc_dim, rng);
  return model;
}

inline IdUsage id_usage_for(Variant variant) {
  switch (variant) {
    case Variant::kDual:
      return {true, true};
    case Variant::kUserOnly:
      return {true, false};
    case Variant::kProductOnly:
      return {false, true};
    case Variant::kTextOnly:
      return {false, false};
  }
  return {true, true};
}

/// Entity rows for one document; withheld identities route to the shared
/// unknown row.
inline std::pair<std::size_t, std::size_t> entity_rows(const ReviewDoc& doc,
                                                       const EncoderParams& params,
                                                       const EntityIndex& users,
                                                       const EntityIndex& products,
                                                       IdUsage usage) {
  return {usage.users ? users.row_of(doc.user_id) : params.unknown_user_row(),
          usage.products ? products.row_of(doc.product_id) : params.unknown_product_row()};
}

inline Metrics evaluate_stage1(const Stage1Model& model, const CorpusView& view,
                               const Vocabulary& vocab, const EntityIndex& users,
                               const EntityIndex& products, IdUsage usage = {}) {
  NoGradGuard no_grad;
  std::vector<int> preds, labels;
  preds.reserve(view.size());
  labels.reserve(view.size());
  for (std::size_t i = 0; i < view.size(); ++i) {
    const ReviewDoc& doc = view.doc(i);
    const auto [u, p] = entity_rows(doc, model.encoder, users, products, usage);
    const Tensor d = encode_document(doc, model.encoder, vocab, u, p);
    preds.push_back(static_cast<int>(predict_class(model.head.logits(d))));
    labels.push_back(doc.label);
  }
  return metrics(preds, labels);
}

inline double stage1_average_loss(const Stage1Model& model, const CorpusView& view,
                                  const Vocabulary& vocab, const EntityIndex& users,
                                  const EntityIndex& products, IdUsage usage = {}) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < view.size(); ++i) {
    const ReviewDoc& doc = view.doc(i);
    const auto [u, p] = entity_rows(doc, model.encoder, users, products, usage);
    const Tensor d = encode_document(doc, model.encoder, vocab, u, p);
    total += cross_entropy(model.head.logits(d), static_cast<std::size_t>(doc.label)).value();
  }
  return view.empty() ? 0.0 : total / view.size();
}

inline Stage1Result train_stage1(const CorpusView& train, const CorpusView& dev,
                                 const Vocabulary& vocab, const EntityIndex& users,
                                 const EntityIndex& products, const TrainConfig& cfg,
                                 IdUsage usage = {}) {
  if (train.empty() || dev.empty()) throw DataError("train_stage1: empty train or dev split");
  const int num_classes = train.corpus().num_classes();
  Stage1Model model = stage1_init(vocab.size(), users.size(), products.size(), num_classes, cfg);
  const std::vector<Tensor*> trainables = model.tensors();

  Stage1Result result;
  Stage1Model best = model.clone();
  detail::EarlyStopper stopper;
  std::vector<std::size_t> order = train.ids();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    Rng shuffle_rng = substream(cfg.seed, "stage1-shuffle", epoch);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (const std::size_t id : order) {
      try {
        const ReviewDoc& doc = train.corpus().doc(id);
        const auto [u, p] = entity_rows(doc, model.encoder, users, products, usage);
        const Tensor d = encode_document(doc, model.encoder, vocab, u, p);
        const Tensor loss =
            cross_entropy(model.head.logits(d), static_cast<std::size_t>(doc.label));
        detail::check_finite_loss(loss.value(), epoch, id);
        loss_sum += loss.value();
        backward(loss);
        sgd_step(trainables, cfg.learning_rate, cfg.clip_norm);
      } catch (const NumericError& e) {
        throw TrainingDivergence("stage 1, epoch " + std::to_string(epoch) + ", doc " +
                                 std::to_string(id) + ": " + e.what());
      }
    }

    const Metrics dev_metrics = evaluate_stage1(model, dev, vocab, users, products, usage);
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / order.size();
    entry.dev_accuracy = dev_metrics.accuracy;
    entry.dev_rmse = dev_metrics.rmse;
    entry.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(entry);

    if (stopper.observe(epoch, dev_metrics.accuracy)) best = model.clone();
    if (stopper.should_stop(cfg.patience)) break;
  }

  result.model = std::move(best);
  result.best_dev_accuracy = stopper.best;
  result.best_epoch = stopper.best_epoch;
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2: DUPMN training over frozen embeddings.

/// Builds per-document banks from training-split contexts. A dev/test document
/// whose user or product has no training reviews gets an all-zero bank (cold
/// start). Selection is re-derived on demand from per-document substreams, so
/// banks are deterministic without being cached.
class BankBuilder {
 public:
  BankBuilder() = default;

  BankBuilder(const CorpusView& train, const EmbeddingMap* embeddings, std::size_t memory_size,
              std::size_t dim, std::uint64_t seed, bool zero_banks = false)
      : embeddings_(embeddings),
        memory_size_(memory_size),
        dim_(dim),
        seed_(seed),
        zero_banks_(zero_banks) {
    for (const std::size_t id : train.ids()) {
      const ReviewDoc& doc = train.corpus().doc(id);
      user_ctx_[doc.user_id].push_back(id);
      product_ctx_[doc.product_id].push_back(id);
    }
    for (auto& [key, ids] : user_ctx_) std::sort(ids.begin(), ids.end());
    for (auto& [key, ids] : product_ctx_) std::sort(ids.begin(), ids.end());
  }

  std::pair<MemoryBank, MemoryBank> banks_for(const ReviewDoc& doc) const {
    if (zero_banks_) {
      MemoryBank zero;
      zero.matrix = Tensor::zeros({dim_, memory_size_});
      zero.valid_count = 0;
      return {zero, zero};
    }
    static const std::vector<std::size_t> kEmpty;
    const auto user_it = user_ctx_.find(doc.user_id);
    const auto product_it = product_ctx_.find(doc.product_id);
    const auto& user_ctx = user_it == user_ctx_.end() ? kEmpty : user_it->second;
    const auto& product_ctx = product_it == product_ctx_.end() ? kEmpty : product_it->second;
    return {build_memory(user_ctx, *embeddings_, doc.doc_id, memory_size_, dim_,
                         substream_seed(seed_, "subsample-user", doc.doc_id)),
            build_memory(product_ctx, *embeddings_, doc.doc_id, memory_size_, dim_,
                         substream_seed(seed_, "subsample-product", doc.doc_id))};
  }

  std::size_t dim() const { return dim_; }
  const std::map<std::string, std::vector<std::size_t>>& user_contexts() const {
    return user_ctx_;
  }
  const std::map<std::string, std::vector<std::size_t>>& product_contexts() const {
    return product_ctx_;
  }

 private:
  std::map<std::string, std::vector<std::size_t>> user_ctx_;
  std::map<std::string, std::vector<std::size_t>> product_ctx_;
  const EmbeddingMap* embeddings_ = nullptr;
  std::size_t memory_size_ = 1;
  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  bool zero_banks_ = false;
};

struct Stage2Result {
  DupmnParams params;
  double best_dev_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::vector<EpochLog> log;
};

inline DupmnParams stage2_init(int num_classes, const TrainConfig& cfg) {
  Rng rng = substream(cfg.seed, "stage2-init");
  DupmnParams params = DupmnParams::init(static_cast<std::size_t>(num_classes), cfg.doc_dim,
                                         cfg.hops, cfg.variant, cfg.diagonal_fusion, rng);
  if (cfg.lock_fusion_identity) {
    params.fusion_user = cfg.diagonal_fusion
                             ? Tensor::full({cfg.doc_dim}, 1.0, true)
                             : Tensor::from({cfg.doc_dim, cfg.doc_dim},
                                            Tensor::identity(cfg.doc_dim).values(), true);
    params.fusion_product = params.fusion_user.detached_copy();
    params.fusion_logits = Tensor::zeros({2}, true);
  }
  return params;
}

inline std::vector<Tensor*> stage2_trainables(DupmnParams& params, const TrainConfig& cfg) {
  std::vector<Tensor*> out{&params.classifier.weight, &params.classifier.bias};
  if (!cfg.lock_fusion_identity) {
    out.push_back(&params.fusion_user);
    out.push_back(&params.fusion_product);
    out.push_back(&params.fusion_logits);
  }
  return out;
}

inline Metrics evaluate_stage2(const DupmnParams& params, const CorpusView& view,
                               const EmbeddingMap& embeddings, const BankBuilder& banks,
                               bool masked = false) {
  NoGradGuard no_grad;
  std::vector<int> preds, labels;
  preds.reserve(view.size());
  labels.reserve(view.size());
  for (std::size_t i = 0; i < view.size(); ++i) {
    const ReviewDoc& doc = view.doc(i);
    const auto [user_bank, product_bank] = banks.banks_for(doc);
    const Tensor logits =
        dupmn_forward(embeddings.at(doc.doc_id), user_bank, product_bank, params, masked);
    preds.push_back(static_cast<int>(predict_class(logits)));
    labels.push_back(doc.label);
  }
  return metrics(preds, labels);
}

inline double stage2_average_loss(const DupmnParams& params, const CorpusView& view,
                                  const EmbeddingMap& embeddings, const BankBuilder& banks,
                                  bool masked = false) {
  NoGradGuard no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < view.size(); ++i) {
    const ReviewDoc& doc = view.doc(i);
    const auto [user_bank, product_bank] = banks.banks_for(doc);
    const Tensor logits =
        dupmn_forward(embeddings.at(doc.doc_id), user_bank, product_bank, params, masked);
    total += cross_entropy(logits, static_cast<std::size_t>(doc.label)).value();
  }
  return view.empty() ? 0.0 : total / view.size();
}

inline Stage2Result train_stage2(const CorpusView& train, const CorpusView& dev,
                                 const EmbeddingMap& embeddings, const TrainConfig& cfg) {
  if (train.empty() || dev.empty()) throw DataError("train_stage2: empty train or dev split");
  for (const std::size_t id : train.ids()) {
    if (!embeddings.count(id)) {
      throw DataError("train_stage2: embeddings missing doc " + std::to_string(id));
    }
  }
  const int num_classes = train.corpus().num_classes();
  DupmnParams params = stage2_init(num_classes, cfg);
  const std::vector<Tensor*> trainables = stage2_trainables(params, cfg);
  const BankBuilder banks(train, &embeddings, cfg.memory_size, cfg.doc_dim, cfg.seed,
                          cfg.zero_banks);

  Stage2Result result;
  DupmnParams best = params.clone();
  detail::EarlyStopper stopper;
  std::vector<std::size_t> order = train.ids();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    Rng shuffle_rng = substream(cfg.seed, "stage2-shuffle", epoch);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (const std::size_t id : order) {
      try {
        const ReviewDoc& doc = train.corpus().doc(id);
        const auto [user_bank, product_bank] = banks.banks_for(doc);
        const Tensor logits = dupmn_forward(embeddings.at(id), user_bank, product_bank, params,
                                            cfg.masked_attention);
        const Tensor loss = cross_entropy(logits, static_cast<std::size_t>(doc.label));
        detail::check_finite_loss(loss.value(), epoch, id);
        loss_sum += loss.value();
        backward(loss);
        sgd_step(trainables, cfg.learning_rate, cfg.clip_norm);
      } catch (const NumericError& e) {
        throw TrainingDivergence("stage 2, epoch " + std::to_string(epoch) + ", doc " +
                                 std::to_string(id) + ": " + e.what());
      }
    }

    const Metrics dev_metrics =
        evaluate_stage2(params, dev, embeddings, banks, cfg.masked_attention);
    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = loss_sum / order.size();
    entry.dev_accuracy = dev_metrics.accuracy;
    entry.dev_rmse = dev_metrics.rmse;
    entry.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(entry);

    if (stopper.observe(epoch, dev_metrics.accuracy)) best = params.clone();
    if (stopper.should_stop(cfg.patience)) break;
  }

  result.params = std::move(best);
  result.best_dev_accuracy = stopper.best;
  result.best_epoch = stopper.best_epoch;
  return result;
}

}  // namespace dupmn
