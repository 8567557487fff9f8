#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dupmn/corpus.hpp"
#include "dupmn/eval.hpp"
#include "dupmn/training.hpp"

namespace dupmn {

/// Stage-2 budgets ride alongside the stage-1 ones; zero means "inherit".
struct PipelineConfig {
  TrainConfig train;
  std::size_t stage2_max_epochs = 30;
  std::size_t stage2_patience = 8;
  double stage2_learning_rate = 0.1;

  TrainConfig stage2_config(Variant variant, std::size_t hops, std::size_t memory_size) const {
    TrainConfig cfg = train;
    cfg.variant = variant;
    cfg.hops = hops;
    cfg.memory_size = memory_size;
    if (stage2_max_epochs > 0) cfg.max_epochs = stage2_max_epochs;
    if (stage2_patience > 0) cfg.patience = stage2_patience;
    if (stage2_learning_rate > 0) cfg.learning_rate = stage2_learning_rate;
    return cfg;
  }
};

struct VariantOutcome {
  Variant variant = Variant::kDual;
  std::size_t hops = 0;
  std::size_t memory_size = 0;
  std::uint64_t seed = 0;
  Metrics test;
  double dev_accuracy = 0.0;
  double w_user = 0.0;
  double w_product = 0.0;
  std::vector<EpochLog> stage1_log;
  std::vector<EpochLog> stage2_log;
};

/// One seed's shared state: the split, vocabulary, entity indices, and a
/// stage-1 model per identity-usage pattern. Ablation variants reuse the
/// stage-1 encoder that matches the information they are allowed to see.
class SeedContext {
 public:
  SeedContext(const Corpus& corpus, const PipelineConfig& config, std::uint64_t seed)
      : corpus_(&corpus), config_(config) {
    config_.train.seed = seed;
    split_ = split_corpus(corpus, seed);
    vocab_ = build_vocab(split_.train, config_.train.min_count);
    users_ = EntityIndex::from_train(split_.train, true);
    products_ = EntityIndex::from_train(split_.train, false);
  }

  const CorpusSplit& split() const { return split_; }
  const Vocabulary& vocab() const { return vocab_; }
  const EntityIndex& users() const { return users_; }
  const EntityIndex& products() const { return products_; }
  const PipelineConfig& config() const { return config_; }
  std::uint64_t seed() const { return config_.train.seed; }

  const Stage1Result& stage1(IdUsage usage) {
    auto& slot = stage1_[key(usage)];
    if (!slot) {
      slot = std::make_unique<Stage1Result>(
          train_stage1(split_.train, split_.dev, vocab_, users_, products_, config_.train, usage));
    }
    return *slot;
  }

  const EmbeddingMap& embeddings(IdUsage usage) {
    auto& slot = embeddings_[key(usage)];
    if (!slot) {
      const Stage1Result& s1 = stage1(usage);
      slot = std::make_unique<EmbeddingMap>(
          encode_all(*corpus_, s1.model.encoder, vocab_, users_, products_, usage));
    }
    return *slot;
  }

 private:
  static int key(IdUsage usage) { return (usage.users ? 2 : 0) | (usage.products ? 1 : 0); }

  const Corpus* corpus_;
  PipelineConfig config_;
  CorpusSplit split_;
  Vocabulary vocab_;
  EntityIndex users_;
  EntityIndex products_;
  std::map<int, std::unique_ptr<Stage1Result>> stage1_;
  std::map<int, std::unique_ptr<EmbeddingMap>> embeddings_;
};

/// Trains and tests one variant inside a seed context.
inline VariantOutcome run_variant(SeedContext& ctx, Variant variant, std::size_t hops,
                                  std::size_t memory_size) {
  const IdUsage usage = id_usage_for(variant);
  const Stage1Result& s1 = ctx.stage1(usage);

  VariantOutcome outcome;
  outcome.variant = variant;
  outcome.hops = hops;
  outcome.memory_size = memory_size;
  outcome.seed = ctx.seed();
  outcome.stage1_log = s1.log;

  if (variant == Variant::kTextOnly) {
    outcome.test = evaluate_stage1(s1.model, ctx.split().test, ctx.vocab(), ctx.users(),
                                   ctx.products(), usage);
    outcome.dev_accuracy = s1.best_dev_accuracy;
    return outcome;
  }

  const EmbeddingMap& embeddings = ctx.embeddings(usage);
  const TrainConfig cfg2 = ctx.config().stage2_config(variant, hops, memory_size);
  const Stage2Result s2 = train_stage2(ctx.split().train, ctx.split().dev, embeddings, cfg2);
  const BankBuilder banks(ctx.split().train, &embeddings, cfg2.memory_size, cfg2.doc_dim,
                          cfg2.seed, cfg2.zero_banks);
  outcome.test = evaluate_stage2(s2.params, ctx.split().test, embeddings, banks,
                                 cfg2.masked_attention);
  outcome.dev_accuracy = s2.best_dev_accuracy;
  const auto [wu, wp] = s2.params.fusion_weights();
  outcome.w_user = wu;
  outcome.w_product = wp;
  outcome.stage2_log = s2.log;
  return outcome;
}

namespace detail {

/// Runs fn(i) for every index, optionally fanning out over threads; failures
/// rethrow in index order with the seed attached by the caller's wrapper.
inline void for_each_index(std::size_t count, int jobs,
                           const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> failures(count);
  std::vector<std::thread> pool;
  for (std::size_t start = 0; start < count; start += jobs) {
    pool.clear();
    const std::size_t end = std::min(start + static_cast<std::size_t>(jobs), count);
    for (std::size_t i = start; i < end; ++i) {
      pool.emplace_back([&, i] {
        try {
          fn(i);
        } catch (...) {
          failures[i] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& failure : failures) {
    if (failure) std::rethrow_exception(failure);
  }
}

}  // namespace detail

/// Full multi-seed evaluation of one variant (the `eval` command).
inline EvalReport run_eval(const Corpus& corpus, const PipelineConfig& config, Variant variant,
                           const std::vector<std::uint64_t>& seeds, int jobs = 1) {
  const auto recipe = [&](std::uint64_t seed) {
    SeedContext ctx(corpus, config, seed);
    return run_variant(ctx, variant, config.train.hops, config.train.memory_size).test;
  };
  return multi_seed_eval(recipe, seeds, jobs, variant_name(variant));
}

// ---------------------------------------------------------------------------
// Ablation grid: variants × hop counts, plus learned fusion-weight averages.

struct AblationReport {
  std::vector<std::uint64_t> seeds;
  std::size_t memory_size = 0;

  struct Cell {
    Variant variant;
    std::size_t hops;
    SummaryStat accuracy, rmse, mae;
    std::vector<VariantOutcome> per_seed;
  };
  std::vector<Cell> cells;

  struct FusionRow {
    std::size_t hops;
    double w_user = 0.0;
    double w_product = 0.0;
  };
  std::vector<FusionRow> fusion;  // dual variant only

  nlohmann::json to_json() const {
    nlohmann::json grid = nlohmann::json::array();
    for (const Cell& cell : cells) {
      nlohmann::json runs = nlohmann::json::array();
      for (const VariantOutcome& o : cell.per_seed) {
        runs.push_back({{"seed", o.seed},
                        {"accuracy", o.test.accuracy},
                        {"rmse", o.test.rmse},
                        {"mae", o.test.mae},
                        {"w_user", o.w_user},
                        {"w_product", o.w_product}});
      }
      grid.push_back({{"variant", variant_name(cell.variant)},
                      {"hops", cell.hops},
                      {"accuracy", cell.accuracy.mean},
                      {"rmse", cell.rmse.mean},
                      {"mae", cell.mae.mean},
                      {"accuracy_stddev", cell.accuracy.stddev},
                      {"runs", runs}});
    }
    nlohmann::json weights = nlohmann::json::array();
    for (const FusionRow& row : fusion) {
      weights.push_back({{"hops", row.hops}, {"w_user", row.w_user}, {"w_product", row.w_product}});
    }
    return nlohmann::json{{"seeds", seeds}, {"memory_size", memory_size},
                          {"grid", grid},   {"fusion_weights", weights}};
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[160];
    os << "Variant x hops grid (means over " << seeds.size() << " seeds, m=" << memory_size
       << ")\n";
    os << "model          Acc     RMSE    MAE\n";
    for (const Cell& cell : cells) {
      std::snprintf(buf, sizeof(buf), "%-9s(%zu)  %.4f  %.4f  %.4f", variant_name(cell.variant),
                    cell.hops, cell.accuracy.mean, cell.rmse.mean, cell.mae.mean);
      os << buf << '\n';
    }
    if (!fusion.empty()) {
      os << "\nAverage fusion weights (dual variant)\n";
      os << "hops  w_U     w_P\n";
      for (const FusionRow& row : fusion) {
        std::snprintf(buf, sizeof(buf), "%-4zu  %.4f  %.4f", row.hops, row.w_user, row.w_product);
        os << buf << '\n';
      }
    }
    return os.str();
  }
};

inline AblationReport run_ablation(const Corpus& corpus, const PipelineConfig& config,
                                   const std::vector<std::uint64_t>& seeds,
                                   const std::vector<std::size_t>& hop_counts, int jobs = 1) {
  const std::vector<Variant> variants{Variant::kUserOnly, Variant::kProductOnly, Variant::kDual};
  std::vector<std::vector<VariantOutcome>> by_seed(seeds.size());

  detail::for_each_index(seeds.size(), jobs, [&](std::size_t i) {
    SeedContext ctx(corpus, config, seeds[i]);
    for (const Variant variant : variants) {
      for (const std::size_t hops : hop_counts) {
        by_seed[i].push_back(run_variant(ctx, variant, hops, config.train.memory_size));
      }
    }
  });

  AblationReport report;
  report.seeds = seeds;
  report.memory_size = config.train.memory_size;
  std::size_t slot = 0;
  for (const Variant variant : variants) {
    for (const std::size_t hops : hop_counts) {
      AblationReport::Cell cell;
      cell.variant = variant;
      cell.hops = hops;
      std::vector<double> acc, rmse, mae;
      for (std::size_t i = 0; i < seeds.size(); ++i) {
        const VariantOutcome& o = by_seed[i][slot];
        cell.per_seed.push_back(o);
        acc.push_back(o.test.accuracy);
        rmse.push_back(o.test.rmse);
        mae.push_back(o.test.mae);
      }
      cell.accuracy = summarize(acc);
      cell.rmse = summarize(rmse);
      cell.mae = summarize(mae);
      report.cells.push_back(std::move(cell));
      ++slot;
    }
  }
  for (const std::size_t hops : hop_counts) {
    AblationReport::FusionRow row;
    row.hops = hops;
    std::size_t count = 0;
    for (const auto& cell : report.cells) {
      if (cell.variant != Variant::kDual || cell.hops != hops) continue;
      for (const VariantOutcome& o : cell.per_seed) {
        row.w_user += o.w_user;
        row.w_product += o.w_product;
        ++count;
      }
    }
    if (count > 0) {
      row.w_user /= count;
      row.w_product /= count;
    }
    report.fusion.push_back(row);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Memory-size sweep.

/// Sweep schedule: steps of 10 until the 75 boundary, then steps of 25 up to
/// 200.
inline std::vector<std::size_t> memory_sweep_schedule() {
  return {1, 10, 20, 30, 40, 50, 60, 70, 75, 100, 125, 150, 175, 200};
}

struct SweepReport {
  std::vector<std::uint64_t> seeds;
  struct Point {
    std::size_t memory_size;
    SummaryStat accuracy;
    std::vector<double> per_seed;
  };
  std::vector<Point> points;

  nlohmann::json to_json() const {
    nlohmann::json series = nlohmann::json::array();
    for (const Point& p : points) {
      series.push_back({{"m", p.memory_size},
                        {"accuracy", p.accuracy.mean},
                        {"accuracy_stddev", p.accuracy.stddev},
                        {"per_seed", p.per_seed}});
    }
    return nlohmann::json{{"seeds", seeds}, {"series", series}};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "m,accuracy_mean,accuracy_stddev\n";
    char buf[96];
    for (const Point& p : points) {
      std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f", p.memory_size, p.accuracy.mean,
                    p.accuracy.stddev);
      os << buf << '\n';
    }
    return os.str();
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[160];
    os << "Accuracy vs memory size (means over " << seeds.size() << " seeds)\n";
    double max_acc = 0.0;
    for (const Point& p : points) max_acc = std::max(max_acc, p.accuracy.mean);
    for (const Point& p : points) {
      const int bars =
          max_acc > 0.0 ? static_cast<int>(p.accuracy.mean / max_acc * 40.0 + 0.5) : 0;
      std::snprintf(buf, sizeof(buf), "m=%-4zu %.4f ", p.memory_size, p.accuracy.mean);
      os << buf << std::string(static_cast<std::size_t>(bars), '#') << '\n';
    }
    os << "note: at full scale, accuracy climbs with memory size up to about 100 and is "
          "flat beyond.\n";
    return os.str();
  }
};

inline SweepReport run_memory_sweep(const Corpus& corpus, const PipelineConfig& config,
                                    const std::vector<std::uint64_t>& seeds,
                                    const std::vector<std::size_t>& schedule, int jobs = 1) {
  std::vector<std::vector<double>> acc_by_seed(seeds.size());
  detail::for_each_index(seeds.size(), jobs, [&](std::size_t i) {
    SeedContext ctx(corpus, config, seeds[i]);
    for (const std::size_t m : schedule) {
      acc_by_seed[i].push_back(
          run_variant(ctx, Variant::kDual, config.train.hops, m).test.accuracy);
    }
  });

  SweepReport report;
  report.seeds = seeds;
  for (std::size_t j = 0; j < schedule.size(); ++j) {
    SweepReport::Point point;
    point.memory_size = schedule[j];
    for (std::size_t i = 0; i < seeds.size(); ++i) point.per_seed.push_back(acc_by_seed[i][j]);
    point.accuracy = summarize(point.per_seed);
    report.points.push_back(std::move(point));
  }
  return report;
}

}  // namespace dupmn
