#include <doctest.h>

#include <cmath>

#include "cl2gd/data.hpp"
#include "cl2gd/engine.hpp"

using namespace cl2gd;

namespace {

Problem<double> toy(double lambda, std::uint64_t seed = 3, Eigen::Index n = 4, Eigen::Index d = 6) {
  data::SynthSpec spec;
  spec.n = n;
  spec.d = d;
  spec.per_client = 15;
  spec.heterogeneity = 1.0;
  spec.seed = seed;
  return data::to_problem(data::synth_instance(spec), 0.02, lambda);
}

StackedModel<double> random_model(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Stream rng(seed, 0);
  StackedModel<double> x(n, d);
  for (auto& v : x.blocks().reshaped()) v = rng.normal();
  return x;
}

ProtocolCompressors compressed(Eigen::Index n) {
  return ProtocolCompressors::uniform(n, CompressorSpec::bernoulli(0.5), CompressorSpec::natural());
}

// Per-coordinate running mean and variance.
struct CoordStats {
  Eigen::ArrayXd mean, m2;
  long count = 0;
  explicit CoordStats(Eigen::Index size) : mean(Eigen::ArrayXd::Zero(size)), m2(Eigen::ArrayXd::Zero(size)) {}
  void add(const Eigen::ArrayXd& v) {
    ++count;
    const Eigen::ArrayXd delta = v - mean;
    mean += delta / count;
    m2 += delta * (v - mean);
  }
  Eigen::ArrayXd std_error() const { return (m2 / (count - 1) / count).sqrt(); }
};

bool within_sigmas(const CoordStats& s, const Eigen::ArrayXd& truth, double sigmas) {
  const Eigen::ArrayXd gap = (s.mean - truth).abs();
  const Eigen::ArrayXd allowed = sigmas * s.std_error() + 1e-12;
  return (gap <= allowed).all();
}

}  // namespace

TEST_CASE("initial state") {
  const auto x0 = random_model(3, 4, 1);
  L2gdState<double> s(x0, 7, ProtocolCompressors::identity(3));
  CHECK(s.prev_xi == 1);
  CHECK(s.k == 0);
  CHECK(s.stored_average == x0.average());
  CHECK(s.rounds == 0);
}

TEST_CASE("unit aggregation coefficient lands every block on the exact average") {
  const auto prob = toy(2.0);
  const auto pc = ProtocolCompressors::identity(prob.n());
  const double p = 0.5;
  const L2gdParams params{p, p * prob.n() / prob.lambda};  // eta*lambda/(np) = 1
  L2gdState<double> s(random_model(prob.n(), prob.dim(), 2), 0, pc);
  l2gd_step_with(prob, s, params, pc, 0);
  const Eigen::VectorXd xbar = s.x.average();
  const auto info = l2gd_step_with(prob, s, params, pc, 1);
  CHECK(info.communicated);
  for (Eigen::Index i = 0; i < prob.n(); ++i) CHECK(s.x.block(i) == xbar);
  CHECK(s.stored_average == xbar);
}

TEST_CASE("consecutive aggregation steps keep the average") {
  const auto prob = toy(3.0);
  const auto pc = ProtocolCompressors::identity(prob.n());
  const L2gdParams params{0.4, 0.05};
  L2gdState<double> s(random_model(prob.n(), prob.dim(), 4), 0, pc);
  l2gd_step_with(prob, s, params, pc, 0);
  l2gd_step_with(prob, s, params, pc, 1);
  const Eigen::VectorXd xbar = s.x.average();
  const double before = consensus_distance(s.x);
  for (int rep = 0; rep < 2; ++rep) {
    const auto info = l2gd_step_with(prob, s, params, pc, 1);
    CHECK_FALSE(info.communicated);
    CHECK((s.x.average() - xbar).norm() <= 1e-12);
  }
  CHECK(consensus_distance(s.x) < before);
}

TEST_CASE("stored average is refreshed only on 0 -> 1 transitions") {
  const auto prob = toy(1.0);
  const auto pc = ProtocolCompressors::identity(prob.n());
  const L2gdParams params{0.5, 0.1};
  L2gdState<double> s(random_model(prob.n(), prob.dim(), 5), 0, pc);
  const Eigen::VectorXd initial = s.stored_average;

  // 1 -> 1 at k = 0 reads the initial average.
  l2gd_step_with(prob, s, params, pc, 1);
  CHECK(s.stored_average == initial);
  CHECK(s.rounds == 0);

  l2gd_step_with(prob, s, params, pc, 0);
  const Eigen::VectorXd fresh = s.x.average();
  l2gd_step_with(prob, s, params, pc, 1);
  CHECK((s.stored_average - fresh).norm() <= 1e-15 * (1 + fresh.norm()));
  CHECK(s.rounds == 1);

  const Eigen::VectorXd kept = s.stored_average;
  l2gd_step_with(prob, s, params, pc, 0);
  CHECK(s.stored_average == kept);
}

TEST_CASE("lambda = 0 gives independent local gradient descent") {
  const auto prob = toy(0.0);
  const double p = 0.3, eta = 0.2;
  L2gdRun<double> run;
  run.params = {p, eta};
  run.iterations = 60;
  run.seed = 9;
  run.compressors = ProtocolCompressors::identity(prob.n());
  run.x0 = random_model(prob.n(), prob.dim(), 6);
  const auto out = run_l2gd(prob, run);

  StackedModel<double> x = *run.x0;
  const double step = eta / (prob.n() * (1 - p));
  for (std::size_t r = 1; r < out.trace.records.size(); ++r) {
    if (out.trace.records[r].xi != 0) continue;
    for (Eigen::Index i = 0; i < prob.n(); ++i) x.block(i) -= step * local_gradient(prob, i, x.block(i));
  }
  CHECK(out.x == x);
}

TEST_CASE("a step is x - eta * G(x)") {
  const auto prob = toy(4.0);
  const auto pc = compressed(prob.n());
  const L2gdParams params{0.35, 0.03};
  L2gdState<double> s(random_model(prob.n(), prob.dim(), 7), 11, pc);
  for (int xi : {0, 0, 1, 1, 1, 0, 1, 0, 0, 1}) {
    RunStreams copy = s.streams;
    const auto G = stochastic_gradient(prob, s.x, xi, s.prev_xi, params.p, pc, copy, &s.stored_average);
    const StackedModel<double> expected = s.x - params.eta * G;
    l2gd_step_with(prob, s, params, pc, xi);
    CHECK((s.x - expected).norm() <= 1e-13 * (1 + expected.norm()));
  }
}

TEST_CASE("estimator cases") {
  const auto prob = toy(2.5);
  const double p = 0.4;
  const auto x = random_model(prob.n(), prob.dim(), 8);
  const auto pc = ProtocolCompressors::identity(prob.n());
  RunStreams streams(0, pc);

  const auto g0 = stochastic_gradient(prob, x, 0, 1, p, pc, streams);
  for (Eigen::Index i = 0; i < prob.n(); ++i)
    CHECK((g0.block(i) - local_gradient(prob, i, x.block(i)) / (prob.n() * (1 - p))).norm() <= 1e-15);

  const auto g11 = stochastic_gradient(prob, x, 1, 1, p, pc, streams);
  const Eigen::VectorXd xbar = x.average();
  for (Eigen::Index i = 0; i < prob.n(); ++i)
    CHECK((g11.block(i) - prob.lambda / (prob.n() * p) * (x.block(i) - xbar)).norm() <= 1e-14);

  // With identity compressors the 0 -> 1 case equals the 1 -> 1 case.
  AggregationResult<double> ex;
  const auto g10 = stochastic_gradient<double>(prob, x, 1, 0, p, pc, streams, nullptr, &ex);
  CHECK((g10 - g11).norm() <= 1e-14);
  CHECK(ex.uplink_bits == static_cast<std::uint64_t>(prob.n() * 32 * prob.dim()));
  CHECK(ex.downlink_bits == static_cast<std::uint64_t>(32 * prob.dim()));

  CHECK_THROWS_AS(stochastic_gradient(prob, x, 0, 1, 0.0, pc, streams), ConfigError);
  CHECK_THROWS_AS(stochastic_gradient(prob, x, 0, 1, 1.0, pc, streams), ConfigError);
}

TEST_CASE("G is unbiased for grad F") {
  const auto prob = toy(3.0, 12, 3, 5);
  const auto x = random_model(prob.n(), prob.dim(), 13);
  GradientSampler<double> sampler(prob, x, 0.4, compressed(prob.n()), 21);
  CoordStats stats(x.blocks().size());
  for (int t = 0; t < 100'000; ++t) stats.add(sampler.sample().blocks().reshaped().array());
  const Eigen::ArrayXd truth = F_gradient(prob, x).blocks().reshaped().array();
  CHECK(within_sigmas(stats, truth, 4.0));
}

TEST_CASE("master output is unbiased for the average") {
  const auto x = random_model(4, 6, 14);
  const auto pc = ProtocolCompressors::uniform(4, CompressorSpec::dithering(2), CompressorSpec::terngrad());
  RunStreams streams(3, pc);
  CoordStats stats(6);
  for (int t = 0; t < 100'000; ++t) stats.add(compressed_average(x, pc, streams).target.array());
  CHECK(within_sigmas(stats, x.average().array(), 4.0));
}

TEST_CASE("bits move only on 0 -> 1 transitions") {
  const auto prob = toy(1.0);
  L2gdRun<double> run;
  run.params = {0.3, 0.05};
  run.iterations = 5000;
  run.seed = 17;
  run.compressors = compressed(prob.n());
  const auto trace = run_l2gd(prob, run).trace;
  REQUIRE(trace.records.size() == 5001);
  CHECK(trace.records[0].xi == -1);
  int prev = 1;
  long transitions = 0;
  for (std::size_t r = 1; r < trace.records.size(); ++r) {
    const auto& a = trace.records[r - 1];
    const auto& b = trace.records[r];
    const bool exchange = b.xi == 1 && prev == 0;
    transitions += exchange;
    CHECK(b.k == static_cast<long>(r));
    CHECK((b.uplink_bits > a.uplink_bits) == exchange);
    CHECK((b.downlink_bits > a.downlink_bits) == exchange);
    CHECK(b.rounds == a.rounds + (exchange ? 1 : 0));
    prev = b.xi;
  }
  CHECK(trace.final().rounds == transitions);
  const auto& last = trace.final();
  CHECK(trace.total_bits(last) == last.uplink_bits + prob.n() * last.downlink_bits);
  CHECK(trace.bits_per_client(last) == doctest::Approx(double(last.uplink_bits + last.downlink_bits) / prob.n()));
}

TEST_CASE("seed replay and coin independence") {
  const auto prob = toy(2.0);
  L2gdRun<double> run;
  run.params = {0.45, 0.04};
  run.iterations = 300;
  run.seed = 5;
  run.compressors = compressed(prob.n());
  const auto a = run_l2gd(prob, run);
  const auto b = run_l2gd(prob, run);
  CHECK(a.trace == b.trace);
  CHECK(a.x == b.x);

  auto xi_of = [](const MetricsTrace& t) {
    std::vector<int> v;
    for (const auto& r : t.records) v.push_back(r.xi);
    return v;
  };
  for (const auto& c : {CompressorSpec::identity(), CompressorSpec::topk(2), CompressorSpec::dithering(8)}) {
    auto other = run;
    other.compressors = ProtocolCompressors::uniform(prob.n(), c, CompressorSpec::natural());
    CHECK(xi_of(run_l2gd(prob, other).trace) == xi_of(a.trace));
  }
  run.seed = 6;
  CHECK(xi_of(run_l2gd(prob, run).trace) != xi_of(a.trace));
}

TEST_CASE("distance to the optimum is recorded when supplied") {
  const auto prob = toy(1.0);
  L2gdRun<double> run;
  run.params = {0.5, 0.05};
  run.iterations = 3;
  run.compressors = ProtocolCompressors::identity(prob.n());
  CHECK_FALSE(run_l2gd(prob, run).trace.records[0].dist_sq.has_value());
  run.x_star = StackedModel<double>::Replicate(Eigen::VectorXd::Ones(prob.dim()), prob.n());
  const auto t = run_l2gd(prob, run).trace;
  REQUIRE(t.records[0].dist_sq.has_value());
  CHECK(*t.records[0].dist_sq == doctest::Approx(double(prob.n() * prob.dim())));
  CHECK(t.records[0].F == doctest::Approx(t.records[0].f + t.records[0].h));
}

TEST_CASE("invalid run parameters") {
  const auto prob = toy(1.0);
  L2gdRun<double> run;
  run.compressors = ProtocolCompressors::identity(prob.n());
  run.params = {0.0, 0.1};
  CHECK_THROWS_AS(run_l2gd(prob, run), ConfigError);
  run.params = {1.0, 0.1};
  CHECK_THROWS_AS(run_l2gd(prob, run), ConfigError);
  run.params = {0.5, 0.0};
  CHECK_THROWS_AS(run_l2gd(prob, run), ConfigError);
  run.params = {0.5, 0.1};
  run.iterations = 0;
  CHECK_THROWS_AS(run_l2gd(prob, run), ConfigError);
  run.iterations = 1;
  run.compressors = ProtocolCompressors::identity(prob.n() - 1);
  CHECK_THROWS_AS(run_l2gd(prob, run), ConfigError);
  run.compressors = ProtocolCompressors::uniform(prob.n(), CompressorSpec::topk(100), CompressorSpec::identity());
  CHECK_THROWS_AS(run_l2gd(prob, run), ConfigError);
}

TEST_CASE("divergent stepsizes raise an invariant error") {
  const auto prob = toy(10.0);
  L2gdRun<double> run;
  run.params = {0.05, 1e6};
  run.iterations = 2000;
  run.compressors = ProtocolCompressors::identity(prob.n());
  run.x0 = random_model(prob.n(), prob.dim(), 3);
  CHECK_THROWS_AS(run_l2gd(prob, run), InvariantError);
}

TEST_CASE("fedavg with identity compressors is plain fedavg") {
  const auto prob = toy(0.0);
  FedAvgParams params;
  params.eta = 0.3;
  params.rounds = 6;
  params.local_steps = 4;
  const auto out = run_fedavg(prob, params, ProtocolCompressors::identity(prob.n()));

  Eigen::VectorXd w = Eigen::VectorXd::Zero(prob.dim());
  for (long r = 0; r < params.rounds; ++r) {
    Eigen::VectorXd next = Eigen::VectorXd::Zero(prob.dim());
    for (Eigen::Index i = 0; i < prob.n(); ++i) {
      Eigen::VectorXd local = w;
      for (long t = 0; t < params.local_steps; ++t) local -= params.eta * local_gradient(prob, i, local);
      next += local;
    }
    w = next / double(prob.n());
  }
  CHECK((out.shared - w).norm() <= 1e-12 * (1 + w.norm()));
  CHECK(out.trace.records.size() == 7);
  CHECK(out.trace.final().k == 24);
  CHECK(out.trace.final().rounds == 6);
  CHECK(out.trace.final().uplink_bits == static_cast<std::uint64_t>(6 * prob.n() * 32 * prob.dim()));
  CHECK(out.trace.final().downlink_bits == static_cast<std::uint64_t>(6 * 32 * prob.dim()));
}

TEST_CASE("fedavg with one client and T = 1 is gradient descent") {
  const auto prob = toy(0.0, 4, 1, 5);
  FedAvgParams params;
  params.eta = 0.5;
  params.rounds = 40;
  const auto out = run_fedavg(prob, params, ProtocolCompressors::identity(1));
  Eigen::VectorXd w = Eigen::VectorXd::Zero(prob.dim());
  for (int r = 0; r < 40; ++r) w -= params.eta * local_gradient(prob, 0, w);
  CHECK((out.shared - w).norm() <= 1e-12);
}

TEST_CASE("fedavg schedule and compressed differences") {
  const auto prob = toy(0.0);
  FedAvgParams params;
  params.eta = 0.2;
  params.rounds = 3;
  params.schedule = {1, 3, 2};
  const auto pc = ProtocolCompressors::uniform(prob.n(), CompressorSpec::natural(), CompressorSpec::natural());
  const auto a = run_fedavg(prob, params, pc);
  CHECK(a.trace.final().k == 6);
  CHECK(a.trace.records[1].k == 1);
  CHECK(a.trace.records[2].k == 4);
  CHECK(a.trace == run_fedavg(prob, params, pc).trace);
  CHECK(a.trace.final().uplink_bits == static_cast<std::uint64_t>(3 * prob.n() * 9 * prob.dim()));

  params.schedule = {1, 2};
  CHECK_THROWS_AS(run_fedavg(prob, params, pc), ConfigError);
  params.schedule = {1, 0, 2};
  CHECK_THROWS_AS(run_fedavg(prob, params, pc), ConfigError);
  params.schedule.clear();
  params.local_steps = 0;
  CHECK_THROWS_AS(run_fedavg(prob, params, pc), ConfigError);
}
