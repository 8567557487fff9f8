#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dupmn/corpus.hpp"
#include "dupmn/rng.hpp"

namespace dupmn {

/// Synthetic review corpus with planted statistics: each user carries a latent
/// leniency bias, each product a latent quality, each document its own text
/// sentiment. The rating discretizes their weighted sum plus noise; the text
/// only ever reflects the document's own sentiment draw, so user and product
/// effects are invisible to a text-only reader.
struct SynthConfig {
  std::size_t num_users = 200;
  std::size_t num_products = 50;
  std::size_t docs_per_user_min = 20;
  std::size_t docs_per_user_max = 60;
  int num_classes = 5;
  std::size_t vocab_size = 120;
  double beta_user = 1.0;
  double beta_product = 1.0;
  double beta_text = 1.0;
  double noise = 0.2;
  std::uint64_t seed = 7;

  nlohmann::json to_json() const {
    return nlohmann::json{{"num_users", num_users},
                          {"num_products", num_products},
                          {"docs_per_user_min", docs_per_user_min},
                          {"docs_per_user_max", docs_per_user_max},
                          {"num_classes", num_classes},
                          {"vocab_size", vocab_size},
                          {"beta_user", beta_user},
                          {"beta_product", beta_product},
                          {"beta_text", beta_text},
                          {"noise", noise},
                          {"seed", seed}};
  }
};

/// Ground truth behind a generated corpus, emitted as a diagnostic sidecar.
struct SynthTruth {
  std::map<std::string, double> user_bias;
  std::map<std::string, double> product_quality;
  std::vector<double> bin_edges;

  nlohmann::json to_json(const SynthConfig& cfg) const {
    return nlohmann::json{{"config", cfg.to_json()},
                          {"bin_edges", bin_edges},
                          {"user_bias", user_bias},
                          {"product_quality", product_quality}};
  }
};

namespace detail {

/// Equal-mass class edges, approximated by Monte-Carlo over the realized
/// document population: resampled (bias, quality) pairs with fresh sentiment
/// and noise draws. Conditioning on the generated entities keeps the class
/// marginals near uniform even for small entity pools.
inline std::vector<double> synth_bin_edges(const SynthConfig& cfg,
                                           const std::vector<double>& doc_bias_quality) {
  constexpr std::size_t kSamples = 1'000'000;
  Rng rng = substream(cfg.seed, "synth-quantiles");
  std::vector<double> samples(kSamples);
  for (double& z : samples) {
    const double base = doc_bias_quality[rng.below(doc_bias_quality.size())];
    const double s = rng.uniform(-1.0, 1.0);
    const double eps = cfg.noise > 0.0 ? rng.gaussian(0.0, cfg.noise) : 0.0;
    z = base + cfg.beta_text * s + eps;
  }
  std::sort(samples.begin(), samples.end());
  std::vector<double> edges;
  for (int c = 1; c < cfg.num_classes; ++c) {
    edges.push_back(samples[kSamples * static_cast<std::size_t>(c) /
                            static_cast<std::size_t>(cfg.num_classes)]);
  }
  return edges;
}

inline int bin_of(double z, const std::vector<double>& edges) {
  int label = 0;
  for (const double e : edges) {
    if (z >= e) ++label;
  }
  return label;
}

/// Sentiment level driving the token pools: equal-width bins of s over
/// (-1, 1), which are also equal-mass since s is uniform.
inline int text_level(double s, int num_classes) {
  const double unit = (s + 1.0) / 2.0;
  int level = static_cast<int>(unit * num_classes);
  if (level < 0) level = 0;
  if (level >= num_classes) level = num_classes - 1;
  return level;
}

}  // namespace detail

/// Probability that a token comes from the sentiment pool instead of the
/// neutral pool. Zero text strength means token soup with no signal; the
/// ceiling keeps decoding imperfect at moderate strengths.
inline double token_signal_probability(double beta_text) {
  return 0.8 * beta_text / (1.0 + beta_text);
}

struct SynthResult {
  Corpus corpus;
  SynthTruth truth;
};

inline SynthResult generate_synth(const SynthConfig& cfg) {
  if (cfg.num_classes < 2) throw DataError("synthgen: need at least 2 classes");
  if (cfg.num_users == 0 || cfg.num_products == 0) {
    throw DataError("synthgen: need at least one user and one product");
  }
  if (cfg.docs_per_user_min > cfg.docs_per_user_max || cfg.docs_per_user_min == 0) {
    throw DataError("synthgen: invalid docs-per-user range");
  }
  if (cfg.beta_user < 0 || cfg.beta_product < 0 || cfg.beta_text < 0 || cfg.noise < 0) {
    throw DataError("synthgen: strengths must be nonnegative");
  }
  const std::size_t classes = static_cast<std::size_t>(cfg.num_classes);
  const std::size_t pool_size = cfg.vocab_size / (2 * classes);
  if (pool_size == 0) {
    throw DataError("synthgen: vocab too small for " + std::to_string(cfg.num_classes) +
                    " sentiment pools");
  }
  const std::size_t neutral_base = classes * pool_size;
  const std::size_t neutral_size = cfg.vocab_size - neutral_base;

  SynthTruth truth;

  auto entity_name = [](char prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c%04zu", prefix, i);
    return std::string(buf);
  };
  auto token_name = [](std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "w%03zu", i);
    return std::string(buf);
  };

  Rng entities = substream(cfg.seed, "synth-entities");
  std::vector<double> user_bias(cfg.num_users);
  std::vector<double> product_quality(cfg.num_products);
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    user_bias[u] = entities.uniform(-1.0, 1.0);
    truth.user_bias[entity_name('u', u)] = user_bias[u];
  }
  for (std::size_t p = 0; p < cfg.num_products; ++p) {
    product_quality[p] = entities.uniform(-1.0, 1.0);
    truth.product_quality[entity_name('p', p)] = product_quality[p];
  }

  const double signal_prob = token_signal_probability(cfg.beta_text);
  Rng docs_rng = substream(cfg.seed, "synth-docs");
  std::vector<ReviewDoc> docs;
  std::vector<double> doc_score;         // latent score per doc
  std::vector<double> doc_bias_quality;  // user+product portion, for the bin edges
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    const std::size_t doc_count = static_cast<std::size_t>(
        docs_rng.int_range(static_cast<std::int64_t>(cfg.docs_per_user_min),
                           static_cast<std::int64_t>(cfg.docs_per_user_max)));
    for (std::size_t d = 0; d < doc_count; ++d) {
      const std::size_t product = docs_rng.below(cfg.num_products);
      const double s = docs_rng.uniform(-1.0, 1.0);
      const double eps = cfg.noise > 0.0 ? docs_rng.gaussian(0.0, cfg.noise) : 0.0;
      const double base =
          cfg.beta_user * user_bias[u] + cfg.beta_product * product_quality[product];
      doc_bias_quality.push_back(base);
      doc_score.push_back(base + cfg.beta_text * s + eps);
      const int level = detail::text_level(s, cfg.num_classes);

      ReviewDoc doc;
      doc.doc_id = docs.size();
      doc.user_id = entity_name('u', u);
      doc.product_id = entity_name('p', product);
      const std::size_t num_sentences = static_cast<std::size_t>(docs_rng.int_range(2, 4));
      for (std::size_t sent = 0; sent < num_sentences; ++sent) {
        const std::size_t num_tokens = static_cast<std::size_t>(docs_rng.int_range(4, 10));
        std::vector<std::string> sentence;
        sentence.reserve(num_tokens);
        for (std::size_t t = 0; t < num_tokens; ++t) {
          std::size_t token_id;
          if (docs_rng.uniform() < signal_prob) {
            token_id = static_cast<std::size_t>(level) * pool_size + docs_rng.below(pool_size);
          } else {
            token_id = neutral_base + docs_rng.below(neutral_size);
          }
          sentence.push_back(token_name(token_id));
        }
        doc.sentences.push_back(std::move(sentence));
      }
      docs.push_back(std::move(doc));
    }
  }

  truth.bin_edges = detail::synth_bin_edges(cfg, doc_bias_quality);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    docs[i].label = detail::bin_of(doc_score[i], truth.bin_edges);
  }

  return {Corpus(std::move(docs), cfg.num_classes), std::move(truth)};
}

/// Writes the corpus in the review-line format plus the ground-truth sidecar.
inline SynthResult generate_synth(const SynthConfig& cfg, const std::string& corpus_path,
                                  const std::string& sidecar_path = "") {
  SynthResult result = generate_synth(cfg);
  write_corpus(result.corpus, corpus_path);
  if (!sidecar_path.empty()) {
    std::ofstream out(sidecar_path);
    if (!out) throw DataError("cannot write sidecar file: " + sidecar_path);
    out << result.truth.to_json(cfg).dump(2) << '\n';
  }
  return result;
}

}  // namespace dupmn
