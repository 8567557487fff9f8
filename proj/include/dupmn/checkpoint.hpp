#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "dupmn/corpus.hpp"
#include "dupmn/encoder.hpp"
#include "dupmn/memnet.hpp"
#include "dupmn/training.hpp"

namespace dupmn {

namespace wire {

// All binary artifacts are little-endian regardless of host order.

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

inline std::uint64_t get_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const std::uint64_t len = get_u64(in);
  std::string s(len, '\0');
  in.read(s.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint: truncated string");
  return s;
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Embedding snapshots: header (dim, count), then per document the doc id and
// its vector.

inline constexpr char kEmbeddingMagic[8] = {'D', 'M', 'N', 'E', 'M', 'B', '0', '1'};

inline void save_embeddings(const EmbeddingMap& embeddings, std::size_t dim,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embeddings file: " + path);
  out.write(kEmbeddingMagic, 8);
  wire::put_u64(out, dim);
  wire::put_u64(out, embeddings.size());
  for (const auto& [doc_id, tensor] : embeddings) {
    if (tensor.size() != dim) {
      throw DataError("embeddings: doc " + std::to_string(doc_id) + " has dimension " +
                      std::to_string(tensor.size()) + ", expected " + std::to_string(dim));
    }
    wire::put_u64(out, doc_id);
    for (const double v : tensor.values()) wire::put_f64(out, v);
  }
}

inline EmbeddingMap load_embeddings(const std::string& path, std::size_t* dim_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embeddings file: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kEmbeddingMagic, 8) != 0) {
    throw DataError("not an embeddings file: " + path);
  }
  const std::uint64_t dim = wire::get_u64(in);
  const std::uint64_t count = wire::get_u64(in);
  if (dim_out) *dim_out = dim;
  EmbeddingMap map;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t doc_id = wire::get_u64(in);
    std::vector<double> data(dim);
    for (double& v : data) v = wire::get_f64(in);
    map.emplace(doc_id, Tensor::from({dim}, std::move(data)));
  }
  return map;
}

// ---------------------------------------------------------------------------
// Model checkpoints: versioned header, key/value metadata, vocabulary and
// entity tables, training-split contexts, then every named parameter tensor.

inline constexpr char kCheckpointMagic[8] = {'D', 'M', 'N', 'C', 'K', 'P', '0', '1'};

struct ModelBundle {
  std::map<std::string, std::string> metadata;
  std::vector<std::string> vocab_tokens;  // full id -> token list
  std::vector<std::string> user_ids;
  std::vector<std::string> product_ids;
  std::map<std::string, std::vector<std::size_t>> user_contexts;
  std::map<std::string, std::vector<std::size_t>> product_contexts;
  std::map<std::string, Tensor> tensors;

  Vocabulary vocabulary() const {
    Vocabulary v;
    for (std::size_t i = 2; i < vocab_tokens.size(); ++i) v.add(vocab_tokens[i]);
    return v;
  }
  EntityIndex user_index() const { return EntityIndex::from_ids(user_ids); }
  EntityIndex product_index() const { return EntityIndex::from_ids(product_ids); }

  const std::string& meta(const std::string& key) const {
    const auto it = metadata.find(key);
    if (it == metadata.end()) throw DataError("checkpoint: missing metadata key '" + key + "'");
    return it->second;
  }

  EncoderParams encoder_params() const {
    EncoderParams params;
    assign(params.named());
    return params;
  }
  SoftmaxHead head_params() const {
    SoftmaxHead head;
    assign(head.named("head"));
    return head;
  }
  bool has_dupmn() const { return tensors.count("dupmn.fusion_user") > 0; }
  DupmnParams dupmn_params() const {
    DupmnParams params;
    assign(params.named());
    params.variant = variant_from_name(meta("variant"));
    params.hops = std::stoul(meta("hops"));
    params.diagonal_fusion = meta("diagonal_fusion") == "1";
    return params;
  }

 private:
  void assign(std::vector<std::pair<std::string, Tensor*>> slots) const {
    for (auto& [name, slot] : slots) {
      const auto it = tensors.find(name);
      if (it == tensors.end()) throw DataError("checkpoint: missing tensor '" + name + "'");
      *slot = it->second.detached_copy();
    }
  }
};

namespace detail {

inline void put_contexts(std::ostream& out,
                         const std::map<std::string, std::vector<std::size_t>>& contexts) {
  wire::put_u64(out, contexts.size());
  for (const auto& [id, docs] : contexts) {
    wire::put_string(out, id);
    wire::put_u64(out, docs.size());
    for (const std::size_t d : docs) wire::put_u64(out, d);
  }
}

inline std::map<std::string, std::vector<std::size_t>> get_contexts(std::istream& in) {
  std::map<std::string, std::vector<std::size_t>> contexts;
  const std::uint64_t count = wire::get_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string id = wire::get_string(in);
    const std::uint64_t n = wire::get_u64(in);
    std::vector<std::size_t> docs(n);
    for (std::uint64_t j = 0; j < n; ++j) docs[j] = wire::get_u64(in);
    contexts.emplace(std::move(id), std::move(docs));
  }
  return contexts;
}

inline void put_string_list(std::ostream& out, const std::vector<std::string>& list) {
  wire::put_u64(out, list.size());
  for (const auto& s : list) wire::put_string(out, s);
}

inline std::vector<std::string> get_string_list(std::istream& in) {
  std::vector<std::string> list(wire::get_u64(in));
  for (auto& s : list) s = wire::get_string(in);
  return list;
}

}  // namespace detail

/// Packs a trained pipeline into a serializable bundle. The memory-stage
/// params are optional (text-only models have none); contexts come from the
/// training-split bank builder so `predict` can rebuild banks later.
inline ModelBundle make_bundle(Stage1Model& stage1, DupmnParams* dupmn, const Vocabulary& vocab,
                               const EntityIndex& users, const EntityIndex& products,
                               const BankBuilder* banks,
                               std::map<std::string, std::string> metadata) {
  ModelBundle bundle;
  bundle.metadata = std::move(metadata);
  bundle.vocab_tokens = vocab.tokens();
  bundle.user_ids = users.ordered_ids();
  bundle.product_ids = products.ordered_ids();
  if (banks) {
    bundle.user_contexts = banks->user_contexts();
    bundle.product_contexts = banks->product_contexts();
  }
  for (auto& [name, tensor] : stage1.named()) bundle.tensors.emplace(name, tensor->detached_copy());
  if (dupmn) {
    for (auto& [name, tensor] : dupmn->named()) {
      bundle.tensors.emplace(name, tensor->detached_copy());
    }
  }
  return bundle;
}

inline void save_model(const ModelBundle& bundle, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  wire::put_u64(out, 1);  // version
  wire::put_u64(out, bundle.metadata.size());
  for (const auto& [key, value] : bundle.metadata) {
    wire::put_string(out, key);
    wire::put_string(out, value);
  }
  detail::put_string_list(out, bundle.vocab_tokens);
  detail::put_string_list(out, bundle.user_ids);
  detail::put_string_list(out, bundle.product_ids);
  detail::put_contexts(out, bundle.user_contexts);
  detail::put_contexts(out, bundle.product_contexts);
  wire::put_u64(out, bundle.tensors.size());
  for (const auto& [name, tensor] : bundle.tensors) {
    wire::put_string(out, name);
    wire::put_u64(out, tensor.ndim());
    for (const std::size_t d : tensor.shape()) wire::put_u64(out, d);
    for (const double v : tensor.values()) wire::put_f64(out, v);
  }
}

inline ModelBundle load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path);
  }
  const std::uint64_t version = wire::get_u64(in);
  if (version != 1) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelBundle bundle;
  const std::uint64_t meta_count = wire::get_u64(in);
  for (std::uint64_t i = 0; i < meta_count; ++i) {
    std::string key = wire::get_string(in);
    bundle.metadata.emplace(std::move(key), wire::get_string(in));
  }
  bundle.vocab_tokens = detail::get_string_list(in);
  bundle.user_ids = detail::get_string_list(in);
  bundle.product_ids = detail::get_string_list(in);
  bundle.user_contexts = detail::get_contexts(in);
  bundle.product_contexts = detail::get_contexts(in);
  const std::uint64_t tensor_count = wire::get_u64(in);
  for (std::uint64_t i = 0; i < tensor_count; ++i) {
    std::string name = wire::get_string(in);
    Shape shape(wire::get_u64(in));
    for (auto& d : shape) d = wire::get_u64(in);
    std::vector<double> data(numel(shape));
    for (double& v : data) v = wire::get_f64(in);
    bundle.tensors.emplace(std::move(name), Tensor::from(std::move(shape), std::move(data)));
  }
  return bundle;
}

}  // namespace dupmn
