#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "dupmn/rng.hpp"

namespace dupmn {

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

class ParseError : public DataError {
 public:
  explicit ParseError(const std::string& what) : DataError(what) {}
};

class LabelError : public DataError {
 public:
  explicit LabelError(const std::string& what) : DataError(what) {}
};

/// Sentence delimiter used by the released review files.
inline constexpr const char* kSentenceMarker = "<sssss>";

struct ReviewDoc {
  std::size_t doc_id = 0;
  std::string user_id;
  std::string product_id;
  int label = 0;  // 0-based class index
  std::vector<std::vector<std::string>> sentences;

  bool operator==(const ReviewDoc&) const = default;

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
};

/// Token ids are dense; 0 is padding, 1 is the unknown token, real tokens
/// follow ordered by (frequency desc, token asc) over the training split.
class Vocabulary {
 public:
  static constexpr std::size_t kPadId = 0;
  static constexpr std::size_t kUnkId = 1;

  Vocabulary() : id_to_token_{"<pad>", "<unk>"} {}

  std::size_t add(const std::string& token) {
    const auto [it, inserted] = token_to_id_.emplace(token, id_to_token_.size());
    if (inserted) id_to_token_.push_back(token);
    return it->second;
  }

  std::size_t id_of(const std::string& token) const {
    const auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }

  bool contains(const std::string& token) const { return token_to_id_.count(token) > 0; }
  const std::string& token_of(std::size_t id) const { return id_to_token_.at(id); }
  std::size_t size() const { return id_to_token_.size(); }

  const std::vector<std::string>& tokens() const { return id_to_token_; }

 private:
  std::unordered_map<std::string, std::size_t> token_to_id_;
  std::vector<std::string> id_to_token_;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(std::vector<ReviewDoc> docs, int num_classes)
      : docs_(std::move(docs)), num_classes_(num_classes) {
    for (const ReviewDoc& d : docs_) {
      by_user_[d.user_id].push_back(d.doc_id);
      by_product_[d.product_id].push_back(d.doc_id);
    }
  }

  const std::vector<ReviewDoc>& docs() const { return docs_; }
  const ReviewDoc& doc(std::size_t id) const { return docs_.at(id); }
  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  int num_classes() const { return num_classes_; }

  const std::map<std::string, std::vector<std::size_t>>& by_user() const { return by_user_; }
  const std::map<std::string, std::vector<std::size_t>>& by_product() const {
    return by_product_;
  }

  const std::vector<std::size_t>* docs_of_user(const std::string& user) const {
    const auto it = by_user_.find(user);
    return it == by_user_.end() ? nullptr : &it->second;
  }
  const std::vector<std::size_t>* docs_of_product(const std::string& product) const {
    const auto it = by_product_.find(product);
    return it == by_product_.end() ? nullptr : &it->second;
  }

 private:
  std::vector<ReviewDoc> docs_;
  int num_classes_ = 0;
  std::map<std::string, std::vector<std::size_t>> by_user_;
  std::map<std::string, std::vector<std::size_t>> by_product_;
};

/// A non-owning list of doc ids over a parent corpus.
class CorpusView {
 public:
  CorpusView() = default;
  CorpusView(const Corpus* corpus, std::vector<std::size_t> ids)
      : corpus_(corpus), ids_(std::move(ids)) {}

  const Corpus& corpus() const { return *corpus_; }
  const std::vector<std::size_t>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const ReviewDoc& doc(std::size_t i) const { return corpus_->doc(ids_.at(i)); }

 private:
  const Corpus* corpus_ = nullptr;
  std::vector<std::size_t> ids_;
};

struct CorpusSplit {
  CorpusView train;
  CorpusView dev;
  CorpusView test;
};

namespace detail {

inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(std::move(tok));
  return out;
}

}  // namespace detail

/// Parses one review file line: user TAB product TAB rating TAB text, with
/// sentences delimited by the literal marker token. Ratings arrive 1-based.
inline ReviewDoc parse_review_line(const std::string& line, std::size_t line_no,
                                   std::size_t doc_id, int num_classes) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
  if (fields.size() != 4) {
    throw ParseError("line " + std::to_string(line_no) + ": expected 4 tab-separated fields, got " +
                     std::to_string(fields.size()));
  }
  ReviewDoc doc;
  doc.doc_id = doc_id;
  doc.user_id = fields[0];
  doc.product_id = fields[1];

  int rating = 0;
  try {
    std::size_t consumed = 0;
    rating = std::stoi(fields[2], &consumed);
    if (consumed != fields[2].size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ParseError("line " + std::to_string(line_no) + ": rating '" + fields[2] +
                     "' is not an integer");
  }
  if (rating < 1 || rating > num_classes) {
    throw LabelError("line " + std::to_string(line_no) + ": rating " + std::to_string(rating) +
                     " outside [1, " + std::to_string(num_classes) + "]");
  }
  doc.label = rating - 1;

  std::vector<std::string> sentence;
  for (auto& tok : detail::split_tokens(fields[3])) {
    if (tok == kSentenceMarker) {
      if (!sentence.empty()) doc.sentences.push_back(std::move(sentence));
      sentence.clear();
    } else {
      sentence.push_back(std::move(tok));
    }
  }
  if (!sentence.empty()) doc.sentences.push_back(std::move(sentence));
  if (doc.sentences.empty()) {
    throw ParseError("line " + std::to_string(line_no) + ": review has no tokens");
  }
  return doc;
}

inline Corpus load_corpus(std::istream& in, int num_classes) {
  std::vector<ReviewDoc> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    docs.push_back(parse_review_line(line, line_no, docs.size(), num_classes));
  }
  return Corpus(std::move(docs), num_classes);
}

inline Corpus load_corpus(const std::string& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file: " + path);
  return load_corpus(in, num_classes);
}

inline void write_corpus(const Corpus& corpus, std::ostream& out) {
  for (const ReviewDoc& d : corpus.docs()) {
    out << d.user_id << '\t' << d.product_id << '\t' << (d.label + 1) << '\t';
    for (std::size_t s = 0; s < d.sentences.size(); ++s) {
      if (s) out << ' ' << kSentenceMarker << ' ';
      for (std::size_t t = 0; t < d.sentences[s].size(); ++t) {
        if (t) out << ' ';
        out << d.sentences[s][t];
      }
    }
    out << '\n';
  }
}

inline void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file: " + path);
  write_corpus(corpus, out);
}

/// Deterministic 8:1:1 split: dev and test get floor(n/10) documents each,
/// the remainder goes to train.
inline CorpusSplit split_corpus(const Corpus& corpus, std::uint64_t seed) {
  const std::size_t n = corpus.size();
  if (n < 10) {
    throw DataError("split requires at least 10 documents, corpus has " + std::to_string(n));
  }
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  Rng rng = substream(seed, "split");
  rng.shuffle(ids);

  const std::size_t n_dev = n / 10;
  const std::size_t n_test = n / 10;
  const std::size_t n_train = n - n_dev - n_test;
  CorpusSplit split;
  split.train = CorpusView(&corpus, {ids.begin(), ids.begin() + n_train});
  split.dev = CorpusView(&corpus, {ids.begin() + n_train, ids.begin() + n_train + n_dev});
  split.test = CorpusView(&corpus, {ids.begin() + n_train + n_dev, ids.end()});
  return split;
}

/// Vocabulary over the training split only; ties in frequency break
/// lexicographically.
inline Vocabulary build_vocab(const CorpusView& train, std::size_t min_count = 2) {
  if (train.empty()) throw DataError("build_vocab: empty training split");
  std::map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (const auto& sentence : train.doc(i).sentences) {
      for (const auto& tok : sentence) ++counts[tok];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [tok, count] : counts) {
    if (count >= min_count) kept.emplace_back(tok, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary vocab;
  for (const auto& [tok, count] : kept) vocab.add(tok);
  return vocab;
}

struct CorpusStats {
  int num_classes = 0;
  std::size_t num_docs = 0;
  std::size_t num_users = 0;
  std::size_t num_products = 0;
  double avg_sentence_len = 0.0;
  double avg_docs_per_user = 0.0;
  double avg_docs_per_product = 0.0;
  // Products binned by review count: [0,50), [50,100), [100,150), [150,200).
  std::array<std::size_t, 4> product_hist{};

  nlohmann::json to_json() const {
    return nlohmann::json{{"num_classes", num_classes},
                          {"num_docs", num_docs},
                          {"num_users", num_users},
                          {"num_products", num_products},
                          {"avg_sentence_len", avg_sentence_len},
                          {"avg_docs_per_user", avg_docs_per_user},
                          {"avg_docs_per_product", avg_docs_per_product},
                          {"products_0_50", product_hist[0]},
                          {"products_50_100", product_hist[1]},
                          {"products_100_150", product_hist[2]},
                          {"products_150_200", product_hist[3]}};
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[64];
    os << "#class        " << num_classes << '\n';
    os << "#doc          " << num_docs << '\n';
    os << "#users        " << num_users << '\n';
    os << "#products     " << num_products << '\n';
    std::snprintf(buf, sizeof(buf), "%.2f", avg_sentence_len);
    os << "Av sen. len   " << buf << '\n';
    std::snprintf(buf, sizeof(buf), "%.2f", avg_docs_per_user);
    os << "Av docs/user  " << buf << '\n';
    std::snprintf(buf, sizeof(buf), "%.2f", avg_docs_per_product);
    os << "Av docs/prod  " << buf << '\n';
    os << "#p(0-50)      " << product_hist[0] << '\n';
    os << "#p(50-100)    " << product_hist[1] << '\n';
    os << "#p(100-150)   " << product_hist[2] << '\n';
    os << "#p(150-200)   " << product_hist[3] << '\n';
    return os.str();
  }
};

inline CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats stats;
  stats.num_classes = corpus.num_classes();
  stats.num_docs = corpus.size();
  stats.num_users = corpus.by_user().size();
  stats.num_products = corpus.by_product().size();

  std::size_t total_sentences = 0;
  std::size_t total_tokens = 0;
  for (const ReviewDoc& d : corpus.docs()) {
    total_sentences += d.sentences.size();
    total_tokens += d.token_count();
  }
  if (total_sentences > 0) {
    stats.avg_sentence_len = static_cast<double>(total_tokens) / total_sentences;
  }
  if (stats.num_users > 0) {
    stats.avg_docs_per_user = static_cast<double>(stats.num_docs) / stats.num_users;
  }
  if (stats.num_products > 0) {
    stats.avg_docs_per_product = static_cast<double>(stats.num_docs) / stats.num_products;
  }
  for (const auto& [product, ids] : corpus.by_product()) {
    const std::size_t n = ids.size();
    if (n < 50) {
      ++stats.product_hist[0];
    } else if (n < 100) {
      ++stats.product_hist[1];
    } else if (n < 150) {
      ++stats.product_hist[2];
    } else if (n < 200) {
      ++stats.product_hist[3];
    }
  }
  return stats;
}

}  // namespace dupmn
