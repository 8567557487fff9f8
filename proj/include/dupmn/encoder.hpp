#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dupmn/corpus.hpp"
#include "dupmn/rng.hpp"
#include "dupmn/tensor.hpp"

namespace dupmn {

/// Additive attention over a list of states. The context vector doubles as
/// the score vector and as the base of the query; user and product embeddings
/// are added to the query so salient tokens can depend on who wrote what.
struct AttentionParams {
  Tensor proj;     // maps key space into query space
  Tensor context;  // query-space context vector

  std::vector<std::pair<std::string, Tensor*>> named(const std::string& prefix) {
    return {{prefix + ".proj", &proj}, {prefix + ".context", &context}};
  }
};

struct SoftmaxHead {
  Tensor weight;  // classes × input
  Tensor bias;    // classes

  Tensor logits(const Tensor& input) const { return add(matvec(weight, input), bias); }

  static SoftmaxHead init(std::size_t classes, std::size_t input_dim, Rng& rng) {
    SoftmaxHead head;
    head.weight = xavier_uniform({classes, input_dim}, rng);
    head.bias = Tensor::zeros({classes}, true);
    return head;
  }

  SoftmaxHead clone() const { return {weight.detached_copy(), bias.detached_copy()}; }

  std::vector<std::pair<std::string, Tensor*>> named(const std::string& prefix) {
    return {{prefix + ".weight", &weight}, {prefix + ".bias", &bias}};
  }

  static Tensor random_uniform(Shape shape, Rng& rng, double radius = 0.1) {
    std::vector<double> data(numel(shape));
    for (double& v : data) v = rng.uniform(-radius, radius);
    return Tensor::from(std::move(shape), std::move(data), /*requires_grad=*/true);
  }

  /// Fan-scaled uniform init for weight matrices.
  static Tensor xavier_uniform(Shape shape, Rng& rng) {
    const double fan_out = static_cast<double>(shape.at(0));
    const double fan_in = static_cast<double>(shape.at(1));
    return random_uniform(std::move(shape), rng, std::sqrt(6.0 / (fan_in + fan_out)));
  }
};

/// Maps entity ids (users or products) seen in the training split to embedding
/// rows. Anything unseen shares one dedicated unknown row.
class EntityIndex {
 public:
  EntityIndex() = default;

  static EntityIndex from_train(const CorpusView& train, bool users) {
    EntityIndex index;
    std::map<std::string, std::size_t> sorted;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const ReviewDoc& d = train.doc(i);
      sorted.emplace(users ? d.user_id : d.product_id, 0);
    }
    std::size_t next = 0;
    for (auto& [id, slot] : sorted) slot = next++;
    index.ids_ = std::move(sorted);
    return index;
  }

  static EntityIndex from_ids(std::vector<std::string> ids) {
    EntityIndex index;
    for (std::size_t i = 0; i < ids.size(); ++i) index.ids_.emplace(std::move(ids[i]), i);
    return index;
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t unknown_row() const { return ids_.size(); }

  std::size_t row_of(const std::string& id) const {
    const auto it = ids_.find(id);
    return it == ids_.end() ? unknown_row() : it->second;
  }

  std::vector<std::string> ordered_ids() const {
    std::vector<std::string> out(ids_.size());
    for (const auto& [id, slot] : ids_) out[slot] = id;
    return out;
  }

 private:
  std::map<std::string, std::size_t> ids_;
};

struct EncoderParams {
  Tensor word_emb;  // |V| × e
  LstmParams word_lstm;
  LstmParams sent_lstm;
  AttentionParams word_attn;
  AttentionParams sent_attn;
  Tensor user_emb;     // (num_users + 1) × h, last row shared unknown
  Tensor product_emb;  // (num_products + 1) × h

  std::size_t embed_dim() const { return word_emb.cols(); }
  std::size_t hidden_dim() const { return word_lstm.hidden_dim(); }
  std::size_t doc_dim() const { return sent_lstm.hidden_dim(); }
  std::size_t unknown_user_row() const { return user_emb.rows() - 1; }
  std::size_t unknown_product_row() const { return product_emb.rows() - 1; }

  static EncoderParams init(std::size_t vocab_size, std::size_t num_users,
                            std::size_t num_products, std::size_t embed, std::size_t hidden,
                            std::size_t doc, Rng& rng) {
    // Embedding tables start at uniform(-0.1, 0.1); weight matrices use
    // fan-scaled ranges so activations keep a usable magnitude.
    auto embedding = [&](Shape shape) {
      return SoftmaxHead::random_uniform(std::move(shape), rng);
    };
    auto weight = [&](Shape shape) { return SoftmaxHead::xavier_uniform(std::move(shape), rng); };
    auto lstm = [&](std::size_t in, std::size_t out) {
      LstmParams p;
      p.w_in_input = weight({out, in});
      p.w_rec_input = weight({out, out});
      p.bias_input = Tensor::zeros({out}, true);
      p.w_in_forget = weight({out, in});
      p.w_rec_forget = weight({out, out});
      p.bias_forget = Tensor::zeros({out}, true);
      p.w_in_cell = weight({out, in});
      p.w_rec_cell = weight({out, out});
      p.bias_cell = Tensor::zeros({out}, true);
      p.w_in_output = weight({out, in});
      p.w_rec_output = weight({out, out});
      p.bias_output = Tensor::zeros({out}, true);
      return p;
    };
    EncoderParams params;
    params.word_emb = embedding({vocab_size, embed});
    params.word_lstm = lstm(embed, hidden);
    params.sent_lstm = lstm(hidden, doc);
    params.word_attn = {weight({hidden, hidden}), embedding({hidden})};
    params.sent_attn = {weight({hidden, doc}), embedding({hidden})};
    params.user_emb = embedding({num_users + 1, hidden});
    params.product_emb = embedding({num_products + 1, hidden});
    return params;
  }

  std::vector<std::pair<std::string, Tensor*>> named() {
    std::vector<std::pair<std::string, Tensor*>> out{{"encoder.word_emb", &word_emb},
                                                     {"encoder.user_emb", &user_emb},
                                                     {"encoder.product_emb", &product_emb}};
    auto add_lstm = [&out](const std::string& prefix, LstmParams& p) {
      const char* names[] = {"w_in_input",  "w_rec_input",  "bias_input",  "w_in_forget",
                             "w_rec_forget", "bias_forget", "w_in_cell",   "w_rec_cell",
                             "bias_cell",   "w_in_output",  "w_rec_output", "bias_output"};
      auto tensors = p.tensors();
      for (std::size_t i = 0; i < tensors.size(); ++i) {
        out.emplace_back(prefix + "." + names[i], tensors[i]);
      }
    };
    add_lstm("encoder.word_lstm", word_lstm);
    add_lstm("encoder.sent_lstm", sent_lstm);
    for (auto& entry : word_attn.named("encoder.word_attn")) out.push_back(entry);
    for (auto& entry : sent_attn.named("encoder.sent_attn")) out.push_back(entry);
    return out;
  }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  EncoderParams clone() const {
    EncoderParams copy = *this;
    for (auto& [name, t] : copy.named()) *t = t->detached_copy();
    return copy;
  }
};

/// Which identities the encoder may attend to. Ablation pipelines withhold
/// the source they ablate: a user-only model must not consume product
/// identity anywhere, and the text-only baseline sees neither.
struct IdUsage {
  bool users = true;
  bool products = true;
};

/// Attention weights observed during one encode, for diagnostics and tests.
struct EncodeTrace {
  std::vector<std::vector<double>> word_weights;  // per sentence
  std::vector<double> sentence_weights;
};

namespace detail {

inline Tensor attention_pool(const std::vector<Tensor>& states, const AttentionParams& attn,
                             const Tensor& query, std::vector<double>* weights_out) {
  std::vector<Tensor> scores;
  scores.reserve(states.size());
  for (const Tensor& state : states) {
    scores.push_back(attn_score(attn.context, attn.proj, state, query));
  }
  const Tensor weights = softmax(stack(scores));
  if (weights_out) *weights_out = weights.values();
  return matvec(stack_cols(states), weights);
}

}  // namespace detail

/// Runs the word LSTM + attention per sentence, then the sentence LSTM +
/// attention over sentence vectors, producing the document vector.
inline Tensor encode_document(const ReviewDoc& doc, const EncoderParams& params,
                              const Vocabulary& vocab, std::size_t user_row,
                              std::size_t product_row, EncodeTrace* trace = nullptr) {
  if (doc.sentences.empty()) throw DataError("encode_document: document has no sentences");
  const std::size_t hidden = params.hidden_dim();
  const std::size_t doc_dim = params.doc_dim();

  const Tensor user_vec = row(params.user_emb, user_row);
  const Tensor product_vec = row(params.product_emb, product_row);
  const Tensor entity_query = add(user_vec, product_vec);
  const Tensor word_query = add(params.word_attn.context, entity_query);
  const Tensor sent_query = add(params.sent_attn.context, entity_query);

  if (trace) {
    trace->word_weights.clear();
    trace->sentence_weights.clear();
  }

  std::vector<Tensor> sentence_vecs;
  sentence_vecs.reserve(doc.sentences.size());
  for (const auto& sentence : doc.sentences) {
    Tensor h = Tensor::zeros({hidden});
    Tensor c = Tensor::zeros({hidden});
    std::vector<Tensor> states;
    states.reserve(sentence.size());
    for (const auto& token : sentence) {
      const Tensor x = row(params.word_emb, vocab.id_of(token));
      auto [h_next, c_next] = lstm_cell(x, h, c, params.word_lstm);
      h = std::move(h_next);
      c = std::move(c_next);
      states.push_back(h);
    }
    std::vector<double> weights;
    sentence_vecs.push_back(detail::attention_pool(states, params.word_attn, word_query,
                                                   trace ? &weights : nullptr));
    if (trace) trace->word_weights.push_back(std::move(weights));
  }

  Tensor h = Tensor::zeros({doc_dim});
  Tensor c = Tensor::zeros({doc_dim});
  std::vector<Tensor> sent_states;
  sent_states.reserve(sentence_vecs.size());
  for (const Tensor& vec : sentence_vecs) {
    auto [h_next, c_next] = lstm_cell(vec, h, c, params.sent_lstm);
    h = std::move(h_next);
    c = std::move(c_next);
    sent_states.push_back(h);
  }
  return detail::attention_pool(sent_states, params.sent_attn, sent_query,
                                trace ? &trace->sentence_weights : nullptr);
}

using EmbeddingMap = std::map<std::size_t, Tensor>;

/// Frozen embedding snapshot of every document; gradients are off so the
/// results are plain value tensors.
inline EmbeddingMap encode_all(const Corpus& corpus, const EncoderParams& params,
                               const Vocabulary& vocab, const EntityIndex& users,
                               const EntityIndex& products, IdUsage usage = {}) {
  NoGradGuard no_grad;
  EmbeddingMap out;
  for (const ReviewDoc& doc : corpus.docs()) {
    const std::size_t u = usage.users ? users.row_of(doc.user_id) : params.unknown_user_row();
    const std::size_t p =
        usage.products ? products.row_of(doc.product_id) : params.unknown_product_row();
    out.emplace(doc.doc_id, encode_document(doc, params, vocab, u, p));
  }
  return out;
}

}  // namespace dupmn
