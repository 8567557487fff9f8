#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dupmn/corpus.hpp"
#include "dupmn/pipeline.hpp"
#include "dupmn/synthgen.hpp"

namespace dupmn {

using ConfigMap = std::map<std::string, std::string>;

/// Flat key=value configuration; '#' and ';' start comments, blank lines are
/// skipped. Command-line flags override file values.
inline ConfigMap parse_config(std::istream& in) {
  ConfigMap out;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto from = s.find_first_not_of(" \t\r");
    if (from == std::string::npos) return std::string();
    const auto to = s.find_last_not_of(" \t\r");
    return s.substr(from, to - from + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.erase(comment);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw DataError("config line " + std::to_string(line_no) + ": empty key");
    }
    out[key] = value;
  }
  return out;
}

inline ConfigMap parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file: " + path);
  return parse_config(in);
}

inline std::string serialize_config(const ConfigMap& config) {
  std::ostringstream os;
  for (const auto& [key, value] : config) os << key << " = " << value << '\n';
  return os.str();
}

namespace detail {

inline std::uint64_t config_u64(const ConfigMap& map, const std::string& key,
                                std::uint64_t fallback) {
  const auto it = map.find(key);
  return it == map.end() ? fallback : std::stoull(it->second);
}

inline double config_f64(const ConfigMap& map, const std::string& key, double fallback) {
  const auto it = map.find(key);
  return it == map.end() ? fallback : std::stod(it->second);
}

inline bool config_bool(const ConfigMap& map, const std::string& key, bool fallback) {
  const auto it = map.find(key);
  if (it == map.end()) return fallback;
  return it->second == "1" || it->second == "true" || it->second == "yes";
}

}  // namespace detail

/// Applies config-file values over the defaults already in `config`.
inline void apply_config(const ConfigMap& map, PipelineConfig& config) {
  TrainConfig& t = config.train;
  t.seed = detail::config_u64(map, "seed", t.seed);
  t.learning_rate = detail::config_f64(map, "learning_rate", t.learning_rate);
  t.clip_norm = detail::config_f64(map, "clip_norm", t.clip_norm);
  t.batch_size = detail::config_u64(map, "batch_size", t.batch_size);
  t.max_epochs = detail::config_u64(map, "max_epochs", t.max_epochs);
  t.patience = detail::config_u64(map, "patience", t.patience);
  t.hops = detail::config_u64(map, "hops", t.hops);
  t.memory_size = detail::config_u64(map, "memory_size", t.memory_size);
  t.embed_dim = detail::config_u64(map, "embed_dim", t.embed_dim);
  t.hidden_dim = detail::config_u64(map, "hidden_dim", t.hidden_dim);
  t.doc_dim = detail::config_u64(map, "doc_dim", t.doc_dim);
  t.min_count = detail::config_u64(map, "min_count", t.min_count);
  if (map.count("variant")) t.variant = variant_from_name(map.at("variant"));
  t.masked_attention = detail::config_bool(map, "masked_attention", t.masked_attention);
  t.diagonal_fusion = detail::config_bool(map, "diagonal_fusion", t.diagonal_fusion);
  t.zero_banks = detail::config_bool(map, "zero_banks", t.zero_banks);
  t.lock_fusion_identity =
      detail::config_bool(map, "lock_fusion_identity", t.lock_fusion_identity);
  t.jobs = static_cast<int>(detail::config_u64(map, "jobs", static_cast<std::uint64_t>(t.jobs)));
  config.stage2_max_epochs = detail::config_u64(map, "stage2_max_epochs", config.stage2_max_epochs);
  config.stage2_patience = detail::config_u64(map, "stage2_patience", config.stage2_patience);
  config.stage2_learning_rate =
      detail::config_f64(map, "stage2_learning_rate", config.stage2_learning_rate);
}

inline ConfigMap to_config(const PipelineConfig& config) {
  const TrainConfig& t = config.train;
  ConfigMap map;
  auto put_u = [&](const char* key, std::uint64_t v) { map[key] = std::to_string(v); };
  auto put_f = [&](const char* key, double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    map[key] = buf;
  };
  put_u("seed", t.seed);
  put_f("learning_rate", t.learning_rate);
  put_f("clip_norm", t.clip_norm);
  put_u("batch_size", t.batch_size);
  put_u("max_epochs", t.max_epochs);
  put_u("patience", t.patience);
  put_u("hops", t.hops);
  put_u("memory_size", t.memory_size);
  put_u("embed_dim", t.embed_dim);
  put_u("hidden_dim", t.hidden_dim);
  put_u("doc_dim", t.doc_dim);
  put_u("min_count", t.min_count);
  map["variant"] = variant_name(t.variant);
  map["masked_attention"] = t.masked_attention ? "1" : "0";
  map["diagonal_fusion"] = t.diagonal_fusion ? "1" : "0";
  map["zero_banks"] = t.zero_banks ? "1" : "0";
  map["lock_fusion_identity"] = t.lock_fusion_identity ? "1" : "0";
  put_u("jobs", static_cast<std::uint64_t>(t.jobs));
  put_u("stage2_max_epochs", config.stage2_max_epochs);
  put_u("stage2_patience", config.stage2_patience);
  put_f("stage2_learning_rate", config.stage2_learning_rate);
  return map;
}

inline void apply_config(const ConfigMap& map, SynthConfig& cfg) {
  cfg.num_users = detail::config_u64(map, "num_users", cfg.num_users);
  cfg.num_products = detail::config_u64(map, "num_products", cfg.num_products);
  cfg.docs_per_user_min = detail::config_u64(map, "docs_per_user_min", cfg.docs_per_user_min);
  cfg.docs_per_user_max = detail::config_u64(map, "docs_per_user_max", cfg.docs_per_user_max);
  cfg.num_classes =
      static_cast<int>(detail::config_u64(map, "num_classes", static_cast<std::uint64_t>(cfg.num_classes)));
  cfg.vocab_size = detail::config_u64(map, "vocab_size", cfg.vocab_size);
  cfg.beta_user = detail::config_f64(map, "beta_user", cfg.beta_user);
  cfg.beta_product = detail::config_f64(map, "beta_product", cfg.beta_product);
  cfg.beta_text = detail::config_f64(map, "beta_text", cfg.beta_text);
  cfg.noise = detail::config_f64(map, "noise", cfg.noise);
  cfg.seed = detail::config_u64(map, "seed", cfg.seed);
}

// ---------------------------------------------------------------------------
// Run manifests.

inline std::uint64_t fnv1a(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Content hash of a corpus file.
inline std::string fingerprint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file for fingerprinting: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
    if (!in) break;
  }
  return hex64(h);
}

/// Identifies a run by its inputs: command, config snapshot, corpus
/// fingerprint, and seed list. Timestamps never enter the id, so identical
/// inputs give identical report bytes.
struct RunManifest {
  std::string command;
  ConfigMap config;
  std::string corpus_path;
  std::string corpus_fingerprint;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> artifacts;
  std::string started_at;
  std::string finished_at;

  std::string run_id() const {
    std::uint64_t h = fnv1a(command.data(), command.size());
    const std::string cfg = serialize_config(config);
    h = fnv1a(cfg.data(), cfg.size(), h);
    h = fnv1a(corpus_fingerprint.data(), corpus_fingerprint.size(), h);
    for (const std::uint64_t seed : seeds) h = fnv1a(&seed, sizeof(seed), h);
    return hex64(h);
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"run_id", run_id()},
                          {"command", command},
                          {"config", config},
                          {"corpus", {{"path", corpus_path}, {"fingerprint", corpus_fingerprint}}},
                          {"seeds", seeds},
                          {"artifacts", artifacts},
                          {"timestamps", {{"started", started_at}, {"finished", finished_at}}}};
  }
};

}  // namespace dupmn
