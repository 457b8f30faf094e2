#ifndef CL2GD_ENGINE_HPP_
#define CL2GD_ENGINE_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cl2gd/compressors.hpp"
#include "cl2gd/errors.hpp"
#include "cl2gd/objective.hpp"
#include "cl2gd/rng.hpp"
#include "cl2gd/stacked_model.hpp"

namespace cl2gd {

/// Uplink (one per client) and downlink (master) operators.
struct ProtocolCompressors {
  std::vector<CompressorSpec> clients;
  CompressorSpec master;

  static ProtocolCompressors uniform(Eigen::Index n, const CompressorSpec& client, const CompressorSpec& master) {
    ProtocolCompressors pc;
    pc.clients.assign(static_cast<std::size_t>(n), client);
    pc.master = master;
    return pc;
  }
  static ProtocolCompressors identity(Eigen::Index n) {
    return uniform(n, CompressorSpec::identity(), CompressorSpec::identity());
  }

  bool all_identity() const {
    if (master.kind != CompressorKind::Identity) return false;
    for (const auto& c : clients)
      if (c.kind != CompressorKind::Identity) return false;
    return true;
  }
  bool all_unbiased() const {
    if (!is_unbiased(master)) return false;
    for (const auto& c : clients)
      if (!is_unbiased(c)) return false;
    return true;
  }
};

/// Independent random streams of one run. The coin stream never depends on
/// the compressor choice, so runs with equal seeds share their xi sequence.
struct RunStreams {
  Stream coin;
  std::vector<Stream> clients;
  Stream master;

  RunStreams() = default;
  RunStreams(std::uint64_t seed, const ProtocolCompressors& pc) : coin(seed, stream::kCoin) {
    clients.reserve(pc.clients.size());
    for (std::size_t i = 0; i < pc.clients.size(); ++i)
      clients.emplace_back(seed, stream::kClientBase + pc.clients[i].stream_id * 65536 + i);
    master = Stream(seed, stream::kMaster + pc.master.stream_id * 65536);
  }
};

template <typename Scalar>
struct AggregationResult {
  Vector<Scalar> target;  // C_M(ybar)
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;  // one broadcast
};

/// ybar = (1/n) sum_j C_j(x_j); returns C_M(ybar) with the bits exchanged.
template <typename Scalar>
AggregationResult<Scalar> compressed_average(const StackedModel<Scalar>& x, const ProtocolCompressors& pc,
                                             RunStreams& streams) {
  const Eigen::Index n = x.clients();
  AggregationResult<Scalar> out;
  Matrix<Scalar> received(x.dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto msg = compress(pc.clients[static_cast<std::size_t>(i)], x.block(i),
                        streams.clients[static_cast<std::size_t>(i)]);
    received.col(i) = msg.payload;
    out.uplink_bits += msg.bit_cost;
  }
  // Same reduction as StackedModel::average, so identity uplinks give xbar bit-for-bit.
  const Vector<Scalar> ybar = received.rowwise().mean();
  auto down = compress(pc.master, ybar, streams.master);
  out.downlink_bits = down.bit_cost;
  out.target = std::move(down.payload);
  return out;
}

struct L2gdParams {
  double p = 0.5;
  double eta = 0.1;

  void validate() const {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie strictly inside (0, 1), got " + std::to_string(p));
    if (!(eta > 0.0)) throw ConfigError("stepsize eta must be > 0, got " + std::to_string(eta));
  }
};

/// The three-case estimator
///   xi_k = 0:                grad f_i(x_i) / (n(1-p))
///   xi_k = 1, xi_{k-1} = 0:  (lambda/(np)) (x_i - C_M(ybar))
///   xi_k = 1, xi_{k-1} = 1:  (lambda/(np)) (x_i - avg)
/// where avg is `stored_average` when supplied and the exact xbar otherwise.
template <typename Scalar>
StackedModel<Scalar> stochastic_gradient(const Problem<Scalar>& prob, const StackedModel<Scalar>& x, int xi,
                                         int prev_xi, double p, const ProtocolCompressors& pc, RunStreams& streams,
                                         const Vector<Scalar>* stored_average = nullptr,
                                         AggregationResult<Scalar>* exchanged = nullptr) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie strictly inside (0, 1)");
  const Scalar n = static_cast<Scalar>(prob.n());
  StackedModel<Scalar> g(prob.n(), prob.dim());
  if (xi == 0) {
    const Scalar scale = Scalar(1) / (n * static_cast<Scalar>(1.0 - p));
    for (Eigen::Index i = 0; i < prob.n(); ++i) g.block(i) = scale * local_gradient(prob, i, x.block(i));
    return g;
  }
  const Scalar scale = prob.lambda / (n * static_cast<Scalar>(p));
  Vector<Scalar> target;
  if (prev_xi == 0) {
    auto agg = compressed_average(x, pc, streams);
    target = agg.target;
    if (exchanged) *exchanged = std::move(agg);
  } else {
    target = stored_average ? *stored_average : x.average();
  }
  g.blocks() = scale * (x.blocks().colwise() - target);
  return g;
}

template <typename Scalar>
struct L2gdState {
  StackedModel<Scalar> x;
  int prev_xi = 1;
  Vector<Scalar> stored_average;
  long k = 0;
  RunStreams streams;
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;  // per broadcast
  long rounds = 0;

  L2gdState() = default;
  L2gdState(StackedModel<Scalar> x0, std::uint64_t seed, const ProtocolCompressors& pc)
      : x(std::move(x0)), prev_xi(1), streams(seed, pc) {
    stored_average = x.average();
  }
};

struct StepInfo {
  int xi = 0;
  bool communicated = false;
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
};

/// One iteration of compressed L2GD with the coin outcome supplied.
/// Aggregation is written as x_i <- (1 - c) x_i + c * target with
/// c = eta*lambda/(np), which is x_i - c (x_i - target) and returns target
/// exactly when c == 1.
template <typename Scalar>
StepInfo l2gd_step_with(const Problem<Scalar>& prob, L2gdState<Scalar>& state, const L2gdParams& params,
                        const ProtocolCompressors& pc, int xi) {
  params.validate();
  StepInfo info;
  info.xi = xi;
  const Scalar n = static_cast<Scalar>(prob.n());

  if (info.xi == 0) {
    const Scalar step = static_cast<Scalar>(params.eta) / (n * static_cast<Scalar>(1.0 - params.p));
    for (Eigen::Index i = 0; i < prob.n(); ++i) {
      state.x.block(i) -= step * local_gradient(prob, i, state.x.block(i));
    }
  } else {
    if (state.prev_xi == 0) {
      auto agg = compressed_average(state.x, pc, state.streams);
      state.stored_average = std::move(agg.target);
      info.communicated = true;
      info.uplink_bits = agg.uplink_bits;
      info.downlink_bits = agg.downlink_bits;
      state.uplink_bits += agg.uplink_bits;
      state.downlink_bits += agg.downlink_bits;
      ++state.rounds;
    }
    const Scalar c = static_cast<Scalar>(params.eta) * prob.lambda / (n * static_cast<Scalar>(params.p));
    state.x.blocks() = (Scalar(1) - c) * state.x.blocks() + c * state.stored_average.replicate(1, prob.n());
  }
  if (!state.x.blocks().allFinite())
    throw InvariantError("l2gd iterate became non-finite at k=" + std::to_string(state.k));
  state.prev_xi = info.xi;
  ++state.k;
  return info;
}

/// One iteration of compressed L2GD: draws xi_k from the coin stream.
template <typename Scalar>
StepInfo l2gd_step(const Problem<Scalar>& prob, L2gdState<Scalar>& state, const L2gdParams& params,
                   const ProtocolCompressors& pc) {
  params.validate();
  const int xi = state.streams.coin.bernoulli(params.p) ? 1 : 0;
  return l2gd_step_with(prob, state, params, pc, xi);
}

struct MetricsRecord {
  long k = 0;
  int xi = -1;  // step that produced this state; -1 for the initial record
  double F = 0, f = 0, h = 0;
  std::optional<double> dist_sq;  // ||x^k - x*||^2
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;  // one count per broadcast
  long rounds = 0;

  bool operator==(const MetricsRecord&) const = default;
};

struct MetricsTrace {
  std::string algorithm;
  long clients = 0;
  std::vector<MetricsRecord> records;

  /// (uplink + broadcast downlink) / n.
  double bits_per_client(const MetricsRecord& r) const {
    return static_cast<double>(r.uplink_bits + r.downlink_bits) / static_cast<double>(clients);
  }
  /// Downlink counted once per receiving client.
  std::uint64_t total_bits(const MetricsRecord& r) const {
    return r.uplink_bits + r.downlink_bits * static_cast<std::uint64_t>(clients);
  }
  const MetricsRecord& final() const { return records.back(); }

  bool operator==(const MetricsTrace&) const = default;
};

template <typename Scalar>
MetricsRecord make_record(const Problem<Scalar>& prob, const StackedModel<Scalar>& x, long k, int xi,
                          const StackedModel<Scalar>* x_star) {
  MetricsRecord r;
  r.k = k;
  r.xi = xi;
  r.f = static_cast<double>(f_value(prob, x));
  r.h = static_cast<double>(h_value(prob.lambda, x));
  r.F = r.f + r.h;
  if (x_star) r.dist_sq = static_cast<double>((x - *x_star).squaredNorm());
  return r;
}

template <typename Scalar>
struct L2gdRun {
  L2gdParams params;
  long iterations = 1;
  std::uint64_t seed = 0;
  ProtocolCompressors compressors;
  std::optional<StackedModel<Scalar>> x0;      // zero when absent
  std::optional<StackedModel<Scalar>> x_star;  // enables dist_sq
};

template <typename Scalar>
struct L2gdResult {
  MetricsTrace trace;
  StackedModel<Scalar> x;
};

/// Applies l2gd_step `iterations` times, recording metrics before the first
/// step and after each step.
template <typename Scalar>
L2gdResult<Scalar> run_l2gd(const Problem<Scalar>& prob, const L2gdRun<Scalar>& run) {
  prob.validate();
  run.params.validate();
  if (run.iterations < 1) throw ConfigError("iteration count K must be >= 1");
  if (static_cast<Eigen::Index>(run.compressors.clients.size()) != prob.n())
    throw ConfigError("need one client compressor per client");
  for (const auto& c : run.compressors.clients) validate(c, prob.dim());
  validate(run.compressors.master, prob.dim());

  L2gdState<Scalar> state(run.x0 ? *run.x0 : StackedModel<Scalar>::Zero(prob.n(), prob.dim()), run.seed,
                          run.compressors);
  const StackedModel<Scalar>* xs = run.x_star ? &*run.x_star : nullptr;

  L2gdResult<Scalar> out;
  out.trace.algorithm = "l2gd";
  out.trace.clients = prob.n();
  out.trace.records.reserve(static_cast<std::size_t>(run.iterations + 1));
  out.trace.records.push_back(make_record(prob, state.x, 0, -1, xs));
  for (long k = 0; k < run.iterations; ++k) {
    const StepInfo info = l2gd_step(prob, state, run.params, run.compressors);
    MetricsRecord r = make_record(prob, state.x, state.k, info.xi, xs);
    r.uplink_bits = state.uplink_bits;
    r.downlink_bits = state.downlink_bits;
    r.rounds = state.rounds;
    out.trace.records.push_back(std::move(r));
  }
  out.x = std::move(state.x);
  return out;
}

/// FedAvg with compressed-difference aggregation. Each round every client
/// runs T gradient steps on f_i from the shared model w, forms
/// g_computed = w - local, sends C(g_computed - g_prev) and both ends set
/// g = g_prev + C(g_computed - g_prev). The master moves w <- w - C_M(mean g).
struct FedAvgParams {
  double eta = 0.1;              // local gradient stepsize
  long rounds = 1;
  long local_steps = 1;          // T, used when schedule is empty
  std::vector<long> schedule;    // optional per-round T
  std::uint64_t seed = 0;

  long steps_in_round(long r) const {
    return schedule.empty() ? local_steps : schedule[static_cast<std::size_t>(r)];
  }
  void validate() const {
    if (!(eta > 0.0)) throw ConfigError("fedavg stepsize must be > 0");
    if (rounds < 1) throw ConfigError("fedavg round count must be >= 1");
    if (!schedule.empty() && static_cast<long>(schedule.size()) != rounds)
      throw ConfigError("fedavg schedule length must equal the round count");
    if (schedule.empty() && local_steps < 1) throw ConfigError("fedavg local step count T must be >= 1");
    for (long t : schedule)
      if (t < 1) throw ConfigError("fedavg schedule entries must be >= 1");
  }
};

template <typename Scalar>
struct FedAvgResult {
  MetricsTrace trace;
  Vector<Scalar> shared;
};

template <typename Scalar>
FedAvgResult<Scalar> run_fedavg(const Problem<Scalar>& prob, const FedAvgParams& params,
                                const ProtocolCompressors& pc,
                                const std::optional<Vector<Scalar>>& w0 = std::nullopt) {
  prob.validate();
  params.validate();
  const Eigen::Index n = prob.n(), d = prob.dim();
  if (static_cast<Eigen::Index>(pc.clients.size()) != n) throw ConfigError("need one client compressor per client");

  RunStreams streams(params.seed, pc);
  Vector<Scalar> w = w0 ? *w0 : Vector<Scalar>::Zero(d);
  Matrix<Scalar> g_prev = Matrix<Scalar>::Zero(d, n);
  const Scalar eta = static_cast<Scalar>(params.eta);

  FedAvgResult<Scalar> out;
  out.trace.algorithm = "fedavg";
  out.trace.clients = n;
  out.trace.records.push_back(make_record<Scalar>(prob, StackedModel<Scalar>::Replicate(w, n), 0, -1, nullptr));
  std::uint64_t up = 0, down = 0;
  long steps = 0;
  for (long r = 0; r < params.rounds; ++r) {
    const long T = params.steps_in_round(r);
    for (Eigen::Index i = 0; i < n; ++i) {
      Vector<Scalar> local = w;
      for (long t = 0; t < T; ++t) local -= eta * local_gradient(prob, i, local);
      const Vector<Scalar> computed = w - local;
      const Vector<Scalar> diff = computed - g_prev.col(i);
      const auto msg = compress(pc.clients[static_cast<std::size_t>(i)], diff,
                                streams.clients[static_cast<std::size_t>(i)]);
      g_prev.col(i) += msg.payload;
      up += msg.bit_cost;
    }
    const Vector<Scalar> mean_g = g_prev.rowwise().mean();
    const auto bcast = compress(pc.master, mean_g, streams.master);
    down += bcast.bit_cost;
    w -= bcast.payload;
    if (!w.allFinite()) throw InvariantError("fedavg shared model became non-finite at round " + std::to_string(r));
    steps += T;

    MetricsRecord rec = make_record<Scalar>(prob, StackedModel<Scalar>::Replicate(w, n), steps, 1, nullptr);
    rec.uplink_bits = up;
    rec.downlink_bits = down;
    rec.rounds = r + 1;
    out.trace.records.push_back(std::move(rec));
  }
  out.shared = std::move(w);
  return out;
}

/// Draws G(x) under the stationary two-step coin law (xi_k, xi_{k-1} i.i.d.
/// Bernoulli(p)), caching the deterministic parts at x. Used by the
/// Monte-Carlo checks of unbiasedness and expected smoothness.
template <typename Scalar>
class GradientSampler {
 public:
  GradientSampler(const Problem<Scalar>& prob, StackedModel<Scalar> x, double p, ProtocolCompressors pc,
                  std::uint64_t seed)
      : prob_(prob), x_(std::move(x)), p_(p), pc_(std::move(pc)), streams_(seed, pc_) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie strictly inside (0, 1)");
    local_ = f_gradient(prob, x_);
    local_ *= Scalar(1) / static_cast<Scalar>(1.0 - p);
    agg_scale_ = prob.lambda / (static_cast<Scalar>(prob.n()) * static_cast<Scalar>(p));
    exact_avg_.blocks() = agg_scale_ * (x_.blocks().colwise() - x_.average());
  }

  const StackedModel<Scalar>& x() const { return x_; }

  /// One draw of G(x).
  StackedModel<Scalar> sample() {
    const bool xi = streams_.coin.bernoulli(p_);
    const bool prev = streams_.coin.bernoulli(p_);
    if (!xi) return local_;
    if (prev) return exact_avg_;
    return compressed_case();
  }

  /// The xi_k = 1, xi_{k-1} = 0 branch only.
  StackedModel<Scalar> compressed_case() {
    const auto agg = compressed_average(x_, pc_, streams_);
    return StackedModel<Scalar>(Matrix<Scalar>(agg_scale_ * (x_.blocks().colwise() - agg.target)));
  }

  const StackedModel<Scalar>& local_case() const { return local_; }
  const StackedModel<Scalar>& exact_average_case() const { return exact_avg_; }

 private:
  const Problem<Scalar>& prob_;
  StackedModel<Scalar> x_;
  double p_;
  ProtocolCompressors pc_;
  RunStreams streams_;
  StackedModel<Scalar> local_;
  StackedModel<Scalar> exact_avg_;
  Scalar agg_scale_ = 0;
};

}  // namespace cl2gd

#endif  // CL2GD_ENGINE_HPP_
