#include "cl2gd/runner.hpp"

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "cl2gd/data.hpp"
#include "cl2gd/errors.hpp"

namespace cl2gd {

using nlohmann::json;

namespace {

constexpr double kOptimumTol = 1e-10;
constexpr long kOptimumMaxIter = 200'000;

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json optimal_p_json(const theory::OptimalP& o) {
  return {{"p_star", o.p_star},         {"p_e", o.p_e},
          {"p_A", o.p_a_defined ? json(o.p_a) : json(nullptr)},
          {"grid_fallback", o.grid_fallback}, {"out_of_range", o.out_of_range},
          {"notes", o.notes}};
}

json cross_check_json(const theory::CrossCheck& c) {
  return {{"closed_form", c.closed_form}, {"grid_p", c.grid_p}, {"grid_step", c.grid_step},
          {"verdict", c.agrees ? "agree" : "disagree"}};
}

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

/// Rethrows the in-flight exception with `prefix` prepended, keeping its type.
[[noreturn]] void rethrow_with(const std::string& prefix) {
  try {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const InvariantError& e) {
    throw InvariantError(prefix + e.what());
  } catch (const std::exception& e) {
    throw std::runtime_error(prefix + e.what());
  }
}

}  // namespace

void parallel_for(std::size_t count, long jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(count, static_cast<std::size_t>(std::max<long>(1, jobs)));
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Problem<double> build_problem(const RunConfig& cfg) {
  const auto& dc = cfg.dataset;
  const auto n = static_cast<std::size_t>(cfg.n);
  data::PartitionedDataset parts;
  if (dc.source == "synth") {
    parts = data::synth_instance({n, dc.d, static_cast<std::size_t>(dc.per_client), dc.heterogeneity, dc.synth_seed});
  } else {
    data::Dataset ds;
    if (dc.source == "libsvm") {
      ds = data::load_libsvm(dc.path, dc.d);
    } else {
      ds = data::adult_surrogate(dc.name);
      ds.dim = std::max<Eigen::Index>(ds.dim, dc.d);
    }
    parts = dc.shuffle_seed ? data::partition_shuffled(ds, n, *dc.shuffle_seed) : data::partition_sequential(ds, n);
  }
  const double lambda = cfg.algorithm == Algorithm::L2gd ? *cfg.lambda : 0.0;
  return data::to_problem(parts, cfg.l2, lambda, cfg.loss);
}

ProtocolCompressors protocol_for(const RunConfig& cfg, Eigen::Index n) {
  return ProtocolCompressors::uniform(n, cfg.client, cfg.master);
}

double resolve_eta(const RunConfig& cfg, const Problem<double>& prob) {
  if (cfg.eta) return *cfg.eta;
  if (cfg.algorithm == Algorithm::FedAvg) return 1.0 / smoothness_constants(prob).L;
  const StackedModel<double>* no_optimum = nullptr;
  const auto t = theory::compute_constants(prob, protocol_for(cfg, prob.n()), *cfg.p, no_optimum, 0, 0);
  return t.stepsize_bound;
}

json theory_json(const RunConfig& cfg, const Problem<double>& prob, const OptimumResult<double>* opt) {
  const auto sc = smoothness_constants(prob);
  json j;
  j["schema"] = kTheorySchema;
  j["smoothness"] = {{"L_f", sc.L_f}, {"L", sc.L}, {"mu", sc.mu}, {"strongly_convex", sc.strongly_convex}};
  if (!sc.strongly_convex) j["smoothness"]["note"] = "not strongly convex";
  if (cfg.algorithm != Algorithm::L2gd) {
    j["note"] = "compressed-L2GD constants are defined for algorithm l2gd only";
    return j;
  }

  const auto pc = protocol_for(cfg, prob.n());
  const double p = *cfg.p, lambda = *cfg.lambda, n = static_cast<double>(prob.n());
  const auto t = theory::compute_constants(prob, pc, p, opt ? &opt->x : nullptr, cfg.theory_samples, cfg.seed);

  j["p"] = p;
  j["lambda"] = lambda;
  j["n"] = prob.n();
  j["compressors"] = {{"client", compressor_to_json(cfg.client)}, {"master", compressor_to_json(cfg.master)}};
  j["uncompressed"] = pc.all_identity();
  if (t.biased_warning) j["warning"] = "biased compressor: omega, alpha, beta, delta have no certificate";
  j["omega"] = t.biased_warning ? json(nullptr) : json(t.omega);
  j["omega_M"] = t.biased_warning ? json(nullptr) : json(t.omega_m);
  j["alpha"] = t.biased_warning ? json(nullptr) : json(t.alpha);
  j["gamma"] = t.gamma;
  j["gamma_lemma"] = t.gamma_lemma;
  j["gamma_u"] = t.gamma_u;
  j["stepsize_bound"] = t.stepsize_bound;

  const double alpha_c = t.biased_warning ? 0.0 : t.alpha;
  const auto gamma_fn = [&](double q) { return theory::gamma(q, lambda, n, sc.L_f, alpha_c); };
  const auto comm_fn = [&](double q) { return q * (1.0 - q) * gamma_fn(q); };
  json rate = optimal_p_json(t.rate);
  rate["grid_check"] = cross_check_json(theory::grid_cross_check(gamma_fn, t.rate.p_star));
  json comm = optimal_p_json(t.communication);
  comm["grid_check"] = cross_check_json(theory::grid_cross_check(comm_fn, t.communication.p_star));
  const auto alt = theory::p_a_communication_alternative(lambda, sc.L, n, alpha_c);
  comm["p_A_alternative"] = optional_number(alt);
  if (alt) {
    const double alt_star = *alt > 0.0 && *alt < 1.0 ? std::max(t.communication.p_e, *alt) : t.communication.p_e;
    comm["p_star_alternative"] = alt_star;
    comm["statement_alternative_mismatch"] = std::abs(alt_star - t.communication.p_star) > 1e-12;
  }
  j["optimal_p_rate"] = rate;
  j["optimal_p_communication"] = comm;
  j["p_e_upper"] = t.p_e_upper;

  if (!opt) return j;
  j["optimum"] = {{"grad_norm", opt->grad_norm}, {"iterations", opt->iterations}, {"converged", opt->converged},
                  {"x_star_sq_norm", opt->x.squaredNorm()}};
  if (t.biased_warning) return j;
  j["beta"] = {{"value", t.beta.mean}, {"std_error", t.beta.std_error}, {"samples", t.beta.samples}};
  j["grad_sq_at_optimum"] = {{"value", t.grad_sq_opt.mean}, {"std_error", t.grad_sq_opt.std_error}};
  j["delta"] = {{"value", t.delta}, {"std_error", t.delta_std_error}};

  const double eta = resolve_eta(cfg, prob);
  const double dist0 = opt->x.squaredNorm();  // runs start at x^0 = 0
  if (sc.strongly_convex) {
    const auto b = theory::strongly_convex_bound(dist0, eta, sc.mu, n, t.delta, t.gamma);
    j["strongly_convex_bound"] = {{"eta", eta},
                                  {"precondition_ok", b.precondition_ok},
                                  {"contraction", b.contraction()},
                                  {"neighborhood", b.neighborhood()},
                                  {"dist0_sq", dist0},
                                  {"iterations_to_neighborhood", b.iterations_to_neighborhood()}};
  }
  const auto zero = StackedModel<double>::Zero(prob.n(), prob.dim());
  const double gap = F_value(prob, zero) - F_value(prob, opt->x);
  const double L_F = sc.L_f + lambda / n;
  const auto budget = theory::nonconvex_budget(cfg.epsilon, L_F, t.gamma, t.delta, gap);
  j["nonconvex_budget"] = {{"epsilon", cfg.epsilon}, {"L_F", L_F}, {"F_gap", gap},
                           {"eta", budget.eta},      {"K", budget.iterations}};
  return j;
}

RunOutcome execute_run(const RunConfig& cfg_in, long jobs) {
  RunOutcome out;
  out.config = normalize(cfg_in);
  const RunConfig& cfg = out.config;
  const Problem<double> prob = build_problem(cfg);
  const auto pc = protocol_for(cfg, prob.n());
  out.eta = resolve_eta(cfg, prob);

  std::optional<OptimumResult<double>> opt;
  if (cfg.algorithm == Algorithm::L2gd) opt = solve_optimum(prob, kOptimumTol, kOptimumMaxIter);
  out.theory = theory_json(cfg, prob, opt ? &*opt : nullptr);

  out.runs.resize(static_cast<std::size_t>(cfg.seeds));
  parallel_for(out.runs.size(), jobs, [&](std::size_t j) {
    SeedOutcome& so = out.runs[j];
    so.seed = cfg.seed + j;
    if (cfg.algorithm == Algorithm::L2gd) {
      L2gdRun<double> run;
      run.params = {*cfg.p, out.eta};
      run.iterations = cfg.K;
      run.seed = so.seed;
      run.compressors = pc;
      run.x_star = opt->x;
      auto res = run_l2gd(prob, run);
      so.trace = std::move(res.trace);
      so.accuracy = accuracy_report(prob, res.x);
    } else {
      FedAvgParams fp;
      fp.eta = out.eta;
      fp.rounds = cfg.K;
      fp.local_steps = *cfg.T;
      fp.seed = so.seed;
      auto res = run_fedavg(prob, fp, pc);
      so.trace = std::move(res.trace);
      so.accuracy = accuracy_report(prob, StackedModel<double>::Replicate(res.shared, prob.n()));
    }
  });
  return out;
}

json trace_record_json(const MetricsTrace& trace, const MetricsRecord& r, std::uint64_t seed) {
  return {{"schema", kTraceSchema},
          {"seed", seed},
          {"k", r.k},
          {"xi", r.xi},
          {"F", r.F},
          {"f", r.f},
          {"h", r.h},
          {"dist_sq", optional_number(r.dist_sq)},
          {"uplink_bits", r.uplink_bits},
          {"downlink_bits", r.downlink_bits},
          {"total_bits", trace.total_bits(r)},
          {"bits_per_n", trace.bits_per_client(r)},
          {"rounds", r.rounds}};
}

json summary_json(const RunOutcome& o) {
  json runs = json::array();
  double mean_F = 0, mean_f = 0, mean_bits = 0;
  for (const auto& so : o.runs) {
    const auto& r = so.trace.final();
    runs.push_back({{"seed", so.seed},
                    {"final_F", r.F},
                    {"final_f", r.f},
                    {"final_h", r.h},
                    {"initial_F", so.trace.records.front().F},
                    {"final_dist_sq", optional_number(r.dist_sq)},
                    {"accuracy_personalized", so.accuracy.personalized_mean},
                    {"accuracy_personalized_per_client", so.accuracy.personalized},
                    {"accuracy_averaged_pooled", so.accuracy.averaged_pooled},
                    {"uplink_bits", r.uplink_bits},
                    {"downlink_bits", r.downlink_bits},
                    {"total_bits", so.trace.total_bits(r)},
                    {"bits_per_n", so.trace.bits_per_client(r)},
                    {"rounds", r.rounds}});
    mean_F += r.F;
    mean_f += r.f;
    mean_bits += so.trace.bits_per_client(r);
  }
  const double s = static_cast<double>(o.runs.size());
  return {{"schema", kSummarySchema},
          {"algorithm", algorithm_name(o.config.algorithm)},
          {"eta", o.eta},
          {"iterations", o.config.K},
          {"runs", runs},
          {"mean_final_F", mean_F / s},
          {"mean_final_f", mean_f / s},
          {"mean_bits_per_n", mean_bits / s}};
}

void write_run(const RunOutcome& o, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", serialize(o.config).dump(2) + "\n");
  std::string jsonl, csv = "seed,k,xi,F,f,h,dist_sq,uplink_bits,downlink_bits,total_bits,bits_per_n,rounds\n";
  for (const auto& so : o.runs) {
    for (const auto& r : so.trace.records) {
      jsonl += trace_record_json(so.trace, r, so.seed).dump() + "\n";
      csv += std::to_string(so.seed) + "," + std::to_string(r.k) + "," + std::to_string(r.xi) + "," +
             csv_number(r.F) + "," + csv_number(r.f) + "," + csv_number(r.h) + "," +
             (r.dist_sq ? csv_number(*r.dist_sq) : std::string()) + "," + std::to_string(r.uplink_bits) + "," +
             std::to_string(r.downlink_bits) + "," + std::to_string(so.trace.total_bits(r)) + "," +
             csv_number(so.trace.bits_per_client(r)) + "," + std::to_string(r.rounds) + "\n";
    }
  }
  write_text(dir / "trace.jsonl", jsonl);
  write_text(dir / "trace.csv", csv);
  write_text(dir / "theory.json", o.theory.dump(2) + "\n");
  write_text(dir / "summary.json", summary_json(o).dump(2) + "\n");
}

std::vector<SweepRecord> execute_sweep(const SweepSpec& spec, long jobs) {
  const RunConfig base = normalize(spec.base);
  const Problem<double> base_prob = build_problem(base);
  const auto pc = protocol_for(base, base_prob.n());
  const std::size_t np = spec.p_grid.size(), nl = spec.lambda_grid.size(), ns = static_cast<std::size_t>(base.seeds);

  std::vector<SweepRecord> records(np * nl * ns);
  parallel_for(records.size(), jobs, [&](std::size_t idx) {
    SweepRecord& rec = records[idx];
    rec.p_index = idx / (nl * ns);
    rec.lambda_index = (idx / ns) % nl;
    rec.seed = base.seed + idx % ns;
    rec.p = spec.p_grid[rec.p_index];
    rec.lambda = spec.lambda_grid[rec.lambda_index];
    try {
      RunConfig cfg = base;
      cfg.p = rec.p;
      cfg.lambda = rec.lambda;
      cfg = normalize(cfg);
      Problem<double> prob = base_prob;
      prob.lambda = rec.lambda;
      rec.eta = resolve_eta(cfg, prob);
      L2gdRun<double> run;
      run.params = {rec.p, rec.eta};
      run.iterations = cfg.K;
      run.seed = rec.seed;
      run.compressors = pc;
      const auto res = run_l2gd(prob, run);
      rec.final = res.trace.final();
      rec.bits_per_n = res.trace.bits_per_client(rec.final);
      rec.total_bits = res.trace.total_bits(rec.final);
    } catch (...) {
      char where[160];
      std::snprintf(where, sizeof where, "sweep point p[%zu]=%g lambda[%zu]=%g seed=%" PRIu64 ": ", rec.p_index, rec.p,
                    rec.lambda_index, rec.lambda, rec.seed);
      rethrow_with(where);
    }
  });
  return records;
}

json sweep_record_json(const SweepRecord& r) {
  return {{"schema", kSweepSchema},
          {"p_index", r.p_index},
          {"lambda_index", r.lambda_index},
          {"seed", r.seed},
          {"p", r.p},
          {"lambda", r.lambda},
          {"eta", r.eta},
          {"final_F", r.final.F},
          {"final_f", r.final.f},
          {"final_h", r.final.h},
          {"uplink_bits", r.final.uplink_bits},
          {"downlink_bits", r.final.downlink_bits},
          {"total_bits", r.total_bits},
          {"bits_per_n", r.bits_per_n},
          {"rounds", r.final.rounds}};
}

void write_sweep(const SweepSpec& spec, const std::vector<SweepRecord>& records, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text(dir / "config.json", serialize(spec).dump(2) + "\n");
  std::string jsonl, csv = "p_index,lambda_index,seed,p,lambda,eta,final_F,final_f,final_h,total_bits,bits_per_n,rounds\n";
  for (const auto& r : records) {
    jsonl += sweep_record_json(r).dump() + "\n";
    csv += std::to_string(r.p_index) + "," + std::to_string(r.lambda_index) + "," + std::to_string(r.seed) + "," +
           csv_number(r.p) + "," + csv_number(r.lambda) + "," + csv_number(r.eta) + "," + csv_number(r.final.F) + "," +
           csv_number(r.final.f) + "," + csv_number(r.final.h) + "," + std::to_string(r.total_bits) + "," +
           csv_number(r.bits_per_n) + "," + std::to_string(r.final.rounds) + "\n";
  }
  write_text(dir / "sweep.jsonl", jsonl);
  write_text(dir / "sweep.csv", csv);
}

json theory_report(const RunConfig& cfg_in) {
  const RunConfig cfg = normalize(cfg_in);
  const Problem<double> prob = build_problem(cfg);
  std::optional<OptimumResult<double>> opt;
  if (cfg.algorithm == Algorithm::L2gd) opt = solve_optimum(prob, kOptimumTol, kOptimumMaxIter);
  return theory_json(cfg, prob, opt ? &*opt : nullptr);
}

}  // namespace cl2gd
