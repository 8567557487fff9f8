#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dupmn/corpus.hpp"
#include "dupmn/tensor.hpp"

namespace dupmn {

struct Metrics {
  double accuracy = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
};

/// Accuracy plus RMSE/MAE over class-index distances. Labels are ordinal
/// ratings, so distances are taken on the 1-based rating scale; shifting both
/// sides by one leaves differences intact.
inline Metrics metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) throw std::invalid_argument("metrics: empty prediction set");
  std::size_t hits = 0;
  double sq = 0.0;
  double abs = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double diff = static_cast<double>(preds[i] + 1) - static_cast<double>(labels[i] + 1);
    if (preds[i] == labels[i]) ++hits;
    sq += diff * diff;
    abs += std::abs(diff);
  }
  Metrics m;
  m.accuracy = static_cast<double>(hits) / preds.size();
  m.rmse = std::sqrt(sq / preds.size());
  m.mae = abs / preds.size();
  return m;
}

namespace detail {

inline double beta_cont_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b) via the Lentz continued fraction.
inline double incomplete_beta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * detail::beta_cont_fraction(a, b, x) / a;
  }
  return 1.0 - front * detail::beta_cont_fraction(b, a, 1.0 - x) / b;
}

/// Two-sided p-value of a Student-t statistic with the given degrees of
/// freedom: P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2).
inline double student_t_two_sided_p(double t, double df) {
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Paired Student t-test with n-1 degrees of freedom.
inline TTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("paired_ttest: sample sizes differ, " + std::to_string(a.size()) +
                                " vs " + std::to_string(b.size()));
  }
  const std::size_t n = a.size();
  if (n < 2) throw std::invalid_argument("paired_ttest: need at least 2 paired samples");
  std::vector<double> diffs(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    diffs[i] = a[i] - b[i];
    mean += diffs[i];
  }
  mean /= n;
  double var = 0.0;
  for (const double d : diffs) var += (d - mean) * (d - mean);
  var /= (n - 1);
  if (var == 0.0) throw NumericError("paired_ttest: degenerate samples (zero variance)");
  TTestResult result;
  result.df = static_cast<double>(n - 1);
  result.t = mean / std::sqrt(var / n);
  result.p = student_t_two_sided_p(result.t, result.df);
  return result;
}

struct SummaryStat {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n-1)
};

inline SummaryStat summarize(const std::vector<double>& values) {
  SummaryStat s;
  if (values.empty()) return s;
  for (const double v : values) s.mean += v;
  s.mean /= values.size();
  if (values.size() > 1) {
    double var = 0.0;
    for (const double v : values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / (values.size() - 1));
  }
  return s;
}

struct EvalReport {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<Metrics> per_seed;
  SummaryStat accuracy;
  SummaryStat rmse;
  SummaryStat mae;
  std::optional<TTestResult> vs_comparison;

  std::vector<double> accuracies() const {
    std::vector<double> out;
    out.reserve(per_seed.size());
    for (const Metrics& m : per_seed) out.push_back(m.accuracy);
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < per_seed.size(); ++i) {
      runs.push_back({{"seed", seeds[i]},
                      {"accuracy", per_seed[i].accuracy},
                      {"rmse", per_seed[i].rmse},
                      {"mae", per_seed[i].mae}});
    }
    nlohmann::json j{{"label", label},
                     {"runs", runs},
                     {"mean", {{"accuracy", accuracy.mean}, {"rmse", rmse.mean}, {"mae", mae.mean}}},
                     {"stddev",
                      {{"accuracy", accuracy.stddev}, {"rmse", rmse.stddev}, {"mae", mae.stddev}}}};
    if (vs_comparison) {
      j["ttest"] = {{"t", vs_comparison->t}, {"p", vs_comparison->p}, {"df", vs_comparison->df}};
    }
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    char buf[128];
    os << "== " << label << " ==\n";
    os << "seed        Acc     RMSE    MAE\n";
    for (std::size_t i = 0; i < per_seed.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%-10llu  %.4f  %.4f  %.4f",
                    static_cast<unsigned long long>(seeds[i]), per_seed[i].accuracy,
                    per_seed[i].rmse, per_seed[i].mae);
      os << buf << '\n';
    }
    std::snprintf(buf, sizeof(buf), "mean        %.4f  %.4f  %.4f", accuracy.mean, rmse.mean,
                  mae.mean);
    os << buf << '\n';
    std::snprintf(buf, sizeof(buf), "stddev      %.4f  %.4f  %.4f", accuracy.stddev, rmse.stddev,
                  mae.stddev);
    os << buf << '\n';
    if (vs_comparison) {
      std::snprintf(buf, sizeof(buf), "paired t-test vs comparison: t=%.4f p=%.6f",
                    vs_comparison->t, vs_comparison->p);
      os << buf << '\n';
    }
    return os.str();
  }
};

/// Runs a full train+test recipe once per seed and aggregates. Seeds are
/// independent, so they may fan out over `jobs` threads; results are collected
/// in seed-list order either way.
inline EvalReport multi_seed_eval(const std::function<Metrics(std::uint64_t)>& recipe,
                                  const std::vector<std::uint64_t>& seeds, int jobs = 1,
                                  const std::string& label = "run") {
  if (seeds.size() < 2) {
    throw std::invalid_argument("multi_seed_eval: need at least 2 seeds, got " +
                                std::to_string(seeds.size()));
  }
  std::vector<Metrics> results(seeds.size());
  std::vector<std::exception_ptr> failures(seeds.size());

  const auto run_one = [&](std::size_t i) {
    try {
      results[i] = recipe(seeds[i]);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };

  if (jobs <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    for (std::size_t start = 0; start < seeds.size(); start += jobs) {
      pool.clear();
      const std::size_t end = std::min(start + static_cast<std::size_t>(jobs), seeds.size());
      for (next = start; next < end; ++next) pool.emplace_back(run_one, next);
      for (auto& t : pool) t.join();
    }
  }

  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!failures[i]) continue;
    const std::string where = "seed " + std::to_string(seeds[i]) + ": ";
    try {
      std::rethrow_exception(failures[i]);
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    } catch (const NumericError& e) {
      throw NumericError(where + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(where + e.what());
    }
  }

  EvalReport report;
  report.label = label;
  report.seeds = seeds;
  report.per_seed = std::move(results);
  std::vector<double> acc, rmse, mae;
  for (const Metrics& m : report.per_seed) {
    acc.push_back(m.accuracy);
    rmse.push_back(m.rmse);
    mae.push_back(m.mae);
  }
  report.accuracy = summarize(acc);
  report.rmse = summarize(rmse);
  report.mae = summarize(mae);
  return report;
}

}  // namespace dupmn
