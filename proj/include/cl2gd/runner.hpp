#ifndef CL2GD_RUNNER_HPP_
#define CL2GD_RUNNER_HPP_

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cl2gd/config.hpp"
#include "cl2gd/engine.hpp"
#include "cl2gd/theory.hpp"

namespace cl2gd {

inline constexpr const char* kTraceSchema = "cl2gd.trace/1";
inline constexpr const char* kSummarySchema = "cl2gd.summary/1";
inline constexpr const char* kTheorySchema = "cl2gd.theory/1";
inline constexpr const char* kSweepSchema = "cl2gd.sweep/1";

/// Dense problem described by the config. FedAvg runs use lambda = 0.
Problem<double> build_problem(const RunConfig& cfg);

ProtocolCompressors protocol_for(const RunConfig& cfg, Eigen::Index n);

/// The configured stepsize, or the automatic one: 1/(2 gamma) for l2gd and
/// 1/L for the fedavg local steps.
double resolve_eta(const RunConfig& cfg, const Problem<double>& prob);

/// Theory-constants record for l2gd configs (constants, optimal p with grid
/// verdicts, strongly convex and nonconvex budgets). `x_star` may be null.
nlohmann::json theory_json(const RunConfig& cfg, const Problem<double>& prob, const OptimumResult<double>* x_star);

struct SeedOutcome {
  std::uint64_t seed = 0;
  MetricsTrace trace;
  AccuracyReport accuracy;
};

struct RunOutcome {
  RunConfig config;
  double eta = 0;
  nlohmann::json theory;
  std::vector<SeedOutcome> runs;
};

/// Runs seeds cfg.seed, cfg.seed + 1, ... (cfg.seeds of them) on up to
/// `jobs` threads. No file I/O.
RunOutcome execute_run(const RunConfig& cfg, long jobs = 1);

nlohmann::json summary_json(const RunOutcome& outcome);
nlohmann::json trace_record_json(const MetricsTrace& trace, const MetricsRecord& r, std::uint64_t seed);

/// Writes config.json, trace.jsonl, trace.csv, theory.json, summary.json.
void write_run(const RunOutcome& outcome, const std::filesystem::path& dir);

struct SweepRecord {
  std::size_t p_index = 0, lambda_index = 0;
  std::uint64_t seed = 0;
  double p = 0, lambda = 0, eta = 0;
  MetricsRecord final;
  double bits_per_n = 0;
  std::uint64_t total_bits = 0;
};

/// One record per (p, lambda, seed), ordered by (p_index, lambda_index, seed).
std::vector<SweepRecord> execute_sweep(const SweepSpec& spec, long jobs = 1);
nlohmann::json sweep_record_json(const SweepRecord& r);
void write_sweep(const SweepSpec& spec, const std::vector<SweepRecord>& records, const std::filesystem::path& dir);

/// Report for the `theory` subcommand (solves for x*, no run).
nlohmann::json theory_report(const RunConfig& cfg);

/// Calls fn(i) for i in [0, count) on up to `jobs` threads. Rethrows the
/// exception of the lowest failing index after all workers finish.
void parallel_for(std::size_t count, long jobs, const std::function<void(std::size_t)>& fn);

}  // namespace cl2gd

#endif  // CL2GD_RUNNER_HPP_
