#ifndef CL2GD_THEORY_HPP_
#define CL2GD_THEORY_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cl2gd/compressors.hpp"
#include "cl2gd/engine.hpp"
#include "cl2gd/errors.hpp"
#include "cl2gd/objective.hpp"

namespace cl2gd::theory {

inline void require_probability(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie strictly inside (0, 1), got " + std::to_string(p));
}

/// 4 omega + 4 omega_M (1 + omega): the compression term shared by alpha and beta.
inline double compression_term(double omega, double omega_m) { return 4.0 * omega + 4.0 * omega_m * (1.0 + omega); }

/// alpha = 4 (4 omega + 4 omega_M (1 + omega)) / mu. Zero without compression
/// regardless of mu.
inline double alpha(double omega, double omega_m, double mu) {
  const double t = compression_term(omega, omega_m);
  if (t == 0.0) return 0.0;
  if (!(mu > 0.0)) return std::numeric_limits<double>::infinity();
  return 4.0 * t / mu;
}

/// Expected-smoothness constant
///   alpha lambda^2 (1-p) / (2 n^2 p) + max{ L_f/(1-p), (lambda/n)(1 + 4(1-p)/p) }.
inline double gamma(double p, double lambda, double n, double L_f, double alpha_c) {
  require_probability(p);
  const double comp = alpha_c == 0.0 ? 0.0 : alpha_c * lambda * lambda * (1.0 - p) / (2.0 * n * n * p);
  return comp + std::max(L_f / (1.0 - p), lambda / n * (1.0 + 4.0 * (1.0 - p) / p));
}

/// Without compression the factor 4 drops: max{ L/(n(1-p)), lambda/(np) }.
inline double gamma_uncompressed(double p, double lambda, double n, double L_f) {
  require_probability(p);
  return std::max(L_f / (1.0 - p), lambda / (n * p));
}

/// gamma_u: the (lambda/n)(1 + 4(1-p)/p) branch relaxed to 4 lambda/(np).
inline double gamma_upper(double p, double lambda, double n, double L_f, double alpha_c) {
  require_probability(p);
  const double comp = alpha_c == 0.0 ? 0.0 : alpha_c * lambda * lambda * (1.0 - p) / (2.0 * n * n * p);
  return comp + std::max(L_f / (1.0 - p), 4.0 * lambda / (n * p));
}

/// delta = 2 beta lambda^2 (1-p) / (n^2 p) + 2 E||G(x*)||^2.
inline double delta(double beta, double lambda, double n, double p, double grad_sq_at_opt) {
  require_probability(p);
  return 2.0 * beta * lambda * lambda * (1.0 - p) / (n * n * p) + 2.0 * grad_sq_at_opt;
}

struct Estimate {
  double mean = 0;
  double std_error = 0;
  long samples = 0;
};

/// Running mean / standard error accumulator (Welford).
class MeanAccumulator {
 public:
  void add(double v) {
    ++count_;
    const double d = v - mean_;
    mean_ += d / static_cast<double>(count_);
    m2_ += d * (v - mean_);
  }
  long count() const { return count_; }
  double mean() const { return mean_; }
  double variance() const { return count_ > 1 ? m2_ / static_cast<double>(count_ - 1) : 0.0; }
  double std_error() const { return count_ > 1 ? std::sqrt(variance() / static_cast<double>(count_)) : 0.0; }
  Estimate estimate() const { return {mean_, std_error(), count_}; }

 private:
  long count_ = 0;
  double mean_ = 0, m2_ = 0;
};

/// Client and master variance factors of a protocol; throws for biased
/// operators.
struct VarianceFactors {
  double omega = 0;
  double omega_m = 0;
};

inline VarianceFactors variance_factors(const ProtocolCompressors& pc, Eigen::Index d) {
  return {joint_variance_factor(pc.clients, d), variance_factor(pc.master, d)};
}

/// beta = 2 (4 omega + 4 omega_M (1 + omega)) ||x*||^2 + 4 E||Q C_M(ybar*) - Q xbar*||^2.
/// The first term is exact; the expectation is Monte-Carlo over the
/// compressors (||Q v||^2 = n ||v||^2).
template <typename Scalar>
Estimate beta_estimate(const Problem<Scalar>& prob, const ProtocolCompressors& pc, const StackedModel<Scalar>& x_star,
                       long samples, std::uint64_t seed) {
  if (samples < 10'000) throw ConfigError("beta_estimate needs at least 1e4 samples");
  const auto vf = variance_factors(pc, prob.dim());
  const double first = 2.0 * compression_term(vf.omega, vf.omega_m) * static_cast<double>(x_star.squaredNorm());
  if (pc.all_identity()) return {first, 0.0, samples};

  RunStreams streams(seed, pc);
  const Vector<Scalar> xbar = x_star.average();
  const double n = static_cast<double>(prob.n());
  MeanAccumulator acc;
  for (long s = 0; s < samples; ++s) {
    const auto agg = compressed_average(x_star, pc, streams);
    acc.add(4.0 * n * static_cast<double>((agg.target - xbar).squaredNorm()));
  }
  return {first + acc.mean(), acc.std_error(), samples};
}

/// E||G(x*)||^2 under the stationary coin law. The three coin cases are
/// mixed exactly with weights (1-p), p(1-p), p^2; only the compressed case
/// is sampled.
template <typename Scalar>
Estimate grad_sq_at_optimum(const Problem<Scalar>& prob, const ProtocolCompressors& pc,
                            const StackedModel<Scalar>& x_star, double p, long samples, std::uint64_t seed) {
  require_probability(p);
  GradientSampler<Scalar> sampler(prob, x_star, p, pc, seed);
  const double local = static_cast<double>(sampler.local_case().squaredNorm());
  const double exact_avg = static_cast<double>(sampler.exact_average_case().squaredNorm());
  MeanAccumulator acc;
  const long draws = pc.all_identity() ? 1 : samples;
  for (long s = 0; s < draws; ++s) acc.add(static_cast<double>(sampler.compressed_case().squaredNorm()));
  const double w = p * (1.0 - p);
  return {(1.0 - p) * local + p * p * exact_avg + w * acc.mean(), w * acc.std_error(), samples};
}

/// Right-hand side (1 - eta mu / n)^k ||x0 - x*||^2 + n eta delta / mu.
struct StronglyConvexBound {
  double eta = 0, mu = 0, n = 1, delta = 0, dist0_sq = 0;
  bool precondition_ok = true;  // eta <= 1/(2 gamma)

  double contraction() const { return 1.0 - eta * mu / n; }
  double neighborhood() const { return n * eta * delta / mu; }
  double at(long k) const { return std::pow(contraction(), static_cast<double>(k)) * dist0_sq + neighborhood(); }
  /// Smallest k with geometric term <= neighborhood (-1 when never).
  long iterations_to_neighborhood() const {
    if (dist0_sq <= neighborhood()) return 0;
    const double c = contraction();
    if (!(c > 0.0 && c < 1.0) || neighborhood() <= 0.0) return -1;
    return static_cast<long>(std::ceil(std::log(neighborhood() / dist0_sq) / std::log(c)));
  }
};

inline StronglyConvexBound strongly_convex_bound(double dist0_sq, double eta, double mu, double n, double delta,
                                                 double gamma_c) {
  if (!(mu > 0.0)) throw ConfigError("strongly convex bound requires mu > 0");
  StronglyConvexBound b{eta, mu, n, delta, dist0_sq, eta <= 1.0 / (2.0 * gamma_c) * (1.0 + 1e-12)};
  return b;
}

struct NonconvexBudget {
  double eta = 0;
  long iterations = 0;
};

/// K = ceil((6L/eps^4) max{12 gamma (F(x0) - F*)^2, delta}) and
/// eta = min{1/sqrt(2 L gamma K), eps^2/(L delta)}.
inline NonconvexBudget nonconvex_budget(double eps, double L, double gamma_c, double delta_c, double gap) {
  if (!(eps > 0.0)) throw ConfigError("epsilon must be > 0");
  const double need = 6.0 * L / std::pow(eps, 4) * std::max(12.0 * gamma_c * gap * gap, delta_c);
  NonconvexBudget out;
  out.iterations = std::max<long>(1, static_cast<long>(std::ceil(need)));
  const double first = 1.0 / std::sqrt(2.0 * L * gamma_c * static_cast<double>(out.iterations));
  const double second = delta_c > 0.0 ? eps * eps / (L * delta_c) : std::numeric_limits<double>::infinity();
  out.eta = std::min(first, second);
  return out;
}

/// Crossing point of the two branches of gamma,
///   p_e = (7 lambda + L - sqrt(lambda^2 + 14 lambda L + L^2)) / (6 lambda),
/// evaluated in the cancellation-free form 8 lambda / (7 lambda + L + sqrt(...)).
inline double p_crossing(double lambda, double L) {
  const double root = std::sqrt(lambda * lambda + 14.0 * lambda * L + L * L);
  const double denom = 7.0 * lambda + L + root;
  return denom > 0.0 ? 8.0 * lambda / denom : 0.0;
}

/// p_e when gamma is replaced by its upper bound gamma_u.
inline double optimal_p_rate_upper(double lambda, double L) {
  const double denom = L + 4.0 * lambda;
  return denom > 0.0 ? 4.0 * lambda / denom : 0.0;
}

struct GridMinimum {
  double p = 0;
  double value = 0;
  double step = 0;
};

/// Brute-force minimizer over `points` uniform nodes of [lo, hi].
inline GridMinimum grid_minimize(const std::function<double(double)>& fn, long points = 100'000, double lo = 1e-6,
                                 double hi = 1.0 - 1e-6) {
  GridMinimum best{lo, std::numeric_limits<double>::infinity(), (hi - lo) / static_cast<double>(points - 1)};
  for (long j = 0; j < points; ++j) {
    const double p = lo + best.step * static_cast<double>(j);
    const double v = fn(p);
    if (v < best.value) {
      best.value = v;
      best.p = p;
    }
  }
  return best;
}

struct CrossCheck {
  double closed_form = 0;
  double grid_p = 0;
  double grid_step = 0;
  bool agrees = false;  // within one grid step, or no worse than the grid value
};

/// Compares a closed-form minimizer against the grid minimizer of `fn`.
inline CrossCheck grid_cross_check(const std::function<double(double)>& fn, double closed_form,
                                   long points = 100'000) {
  const auto g = grid_minimize(fn, points);
  CrossCheck c{closed_form, g.p, g.step, false};
  if (std::abs(closed_form - g.p) <= g.step * (1.0 + 1e-9)) {
    c.agrees = true;
  } else if (closed_form > 0.0 && closed_form < 1.0) {
    const double v = fn(closed_form);
    c.agrees = v <= g.value + 1e-12 * std::max(1.0, std::abs(g.value));
  }
  return c;
}

struct OptimalP {
  double p_star = 0;
  double p_e = 0;
  double p_a = 0;
  bool p_a_defined = false;
  bool grid_fallback = false;     // closed-form root selection failed
  bool out_of_range = false;      // p_star not in (0, 1)
  std::vector<std::string> notes;
};

/// Stationary points of A(p) = alpha lambda^2 / (2 n^2 p) + L / (n (1 - p)).
/// The two closed-form candidates
///   (-2 alpha lambda^2 +- 2 lambda sqrt(2 alpha n L)) / (2 (2 n L - alpha lambda^2))
/// are evaluated in the factored forms a/(a + b) and a/(a - b) with
/// a = lambda sqrt(alpha), b = sqrt(2 n L); 1/2 when a == b.
struct StationaryCandidates {
  double plus = 0, minus = 0;
  bool equal_case = false;
};

inline StationaryCandidates p_a_candidates(double lambda, double L, double n, double alpha_c) {
  const double a = lambda * std::sqrt(alpha_c);
  const double b = std::sqrt(2.0 * n * L);
  StationaryCandidates c;
  if (std::abs(2.0 * n * L - alpha_c * lambda * lambda) <= 1e-12 * std::max(2.0 * n * L, alpha_c * lambda * lambda)) {
    c.equal_case = true;
    c.plus = c.minus = 0.5;
    return c;
  }
  c.plus = a / (a + b);
  c.minus = a / (a - b);
  return c;
}

/// p* minimizing gamma: max{p_e, p_A}.
inline OptimalP optimal_p_rate(double lambda, double L, double n, double alpha_c) {
  OptimalP out;
  out.p_e = p_crossing(lambda, L);
  if (alpha_c > 0.0 && lambda > 0.0) {
    const auto c = p_a_candidates(lambda, L, n, alpha_c);
    const bool plus_ok = c.plus > 0.0 && c.plus < 1.0;
    const bool minus_ok = c.minus > 0.0 && c.minus < 1.0;
    if (c.equal_case) {
      out.p_a = 0.5;
      out.p_a_defined = true;
    } else if (plus_ok != minus_ok) {
      out.p_a = plus_ok ? c.plus : c.minus;
      out.p_a_defined = true;
    } else {
      const double L_f = L / n;
      const auto g = grid_minimize([&](double p) {
        return alpha_c * lambda * lambda / (2.0 * n * n * p) + L_f / (1.0 - p);
      });
      out.p_a = g.p;
      out.p_a_defined = true;
      out.grid_fallback = true;
      out.notes.emplace_back("p_A root selection ambiguous; grid minimizer used");
    }
  } else {
    out.notes.emplace_back("alpha*lambda^2 = 0: A(p) has no interior minimizer, p* = p_e");
  }
  out.p_star = out.p_a_defined ? std::max(out.p_e, out.p_a) : out.p_e;
  if (!(out.p_star > 0.0 && out.p_star < 1.0)) {
    out.out_of_range = true;
    out.notes.emplace_back(lambda == 0.0 ? "lambda = 0: no communication regime (p* -> 0)" : "p* outside (0, 1)");
  }
  return out;
}

/// p* minimizing the communication measure C = p(1-p) gamma, taking
/// p_A = 1 - L n / (alpha lambda^2). When L n >= alpha lambda^2 the interior
/// candidate is not a probability and p* = p_e.
inline OptimalP optimal_p_communication(double lambda, double L, double n, double alpha_c) {
  OptimalP out;
  out.p_e = p_crossing(lambda, L);
  if (alpha_c > 0.0 && lambda > 0.0) {
    out.p_a = 1.0 - L * n / (alpha_c * lambda * lambda);
    out.p_a_defined = true;
  } else {
    out.notes.emplace_back("alpha = 0: p_A undefined, p* = p_e");
  }
  out.p_star = (out.p_a_defined && out.p_a > 0.0) ? std::max(out.p_e, out.p_a) : out.p_e;
  if (!(out.p_star > 0.0 && out.p_star < 1.0)) {
    out.out_of_range = true;
    out.notes.emplace_back(lambda == 0.0 ? "lambda = 0: no communication regime (p* -> 0)" : "p* outside (0, 1)");
  }
  return out;
}

/// Minimizer of the alternative A(p) = alpha lambda^2 (1 - p^2)/(2n) + L p
/// that appears in the derivation of the communication-optimal p, i.e.
/// p = L n / (alpha lambda^2). Reported next to the stated formula.
inline std::optional<double> p_a_communication_alternative(double lambda, double L, double n, double alpha_c) {
  if (!(alpha_c > 0.0 && lambda > 0.0)) return std::nullopt;
  return L * n / (alpha_c * lambda * lambda);
}

/// Checks min_{k < K} q_k <= (1+a)^K p_0 / (b K) + c / b for sequences
/// satisfying p_{k+1} <= (1+a) p_k - b q_k + c, where K = p.size() - 1 and
/// q holds at least K entries. Rejects invalid input with ConfigError.
inline bool recursion_bound_check(std::span<const double> p, std::span<const double> q, double a, double b, double c,
                                  double rel_tol = 1e-12) {
  if (p.size() < 2) throw ConfigError("recursion check needs at least p_0 and p_1");
  const std::size_t K = p.size() - 1;
  if (q.size() < K) throw ConfigError("recursion check needs K entries of q");
  if (a < 0 || c < 0 || !(b > 0)) throw ConfigError("recursion constants need a, c >= 0 and b > 0");
  for (double v : p)
    if (!(v >= 0)) throw ConfigError("p sequence must be non-negative");
  for (std::size_t k = 0; k < K; ++k) {
    if (!(q[k] >= 0)) throw ConfigError("q sequence must be non-negative");
    const double rhs = (1.0 + a) * p[k] - b * q[k] + c;
    const double scale = std::max({(1.0 + a) * p[k], b * q[k], c, 1e-300});
    if (p[k + 1] > rhs + rel_tol * scale)
      throw ConfigError("recursion precondition violated at k=" + std::to_string(k));
  }
  const double min_q = *std::min_element(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(K));
  const double Kd = static_cast<double>(K);
  const double bound = std::pow(1.0 + a, Kd) / (b * Kd) * p[0] + c / b;
  return min_q <= bound * (1.0 + rel_tol);
}

/// ||x||^2 <= (4/mu)(F(x) - F*) + 2 ||x*||^2.
inline double iterate_norm_bound(double F_gap, double mu, double x_star_sq) {
  return 4.0 / mu * F_gap + 2.0 * x_star_sq;
}

/// Right-hand side of the aggregation-error bound
///   (4 n^2 / lambda^2) ||grad h(x) - grad h(x*)||^2 + alpha (F(x) - F*) + beta.
inline double aggregation_error_bound(double n, double lambda, double grad_h_diff_sq, double alpha_c, double F_gap,
                                      double beta) {
  return 4.0 * n * n / (lambda * lambda) * grad_h_diff_sq + alpha_c * F_gap + beta;
}

/// All constants derived for one (problem, protocol, p) configuration.
struct TheoryConstants {
  double L_f = 0, L = 0, mu = 0;
  bool strongly_convex = false;
  double omega = 0, omega_m = 0;
  double alpha = 0;
  Estimate beta;
  Estimate grad_sq_opt;
  double gamma_lemma = 0;  // full expected-smoothness formula
  double gamma = 0;        // effective: uncompressed form when every operator is identity
  double gamma_u = 0;
  double delta = 0;
  double delta_std_error = 0;
  double p = 0, lambda = 0, n = 0;
  double stepsize_bound = 0;  // 1/(2 gamma)
  double contraction = 0;     // 1 - eta mu / n at eta = stepsize_bound
  double neighborhood = 0;    // n eta delta / mu at eta = stepsize_bound
  OptimalP rate;
  OptimalP communication;
  double p_e_upper = 0;
  bool biased_warning = false;
  bool have_optimum = false;
};

/// Computes every constant. When x* is absent, beta/delta-related fields stay
/// zero and `have_optimum` is false. Biased compressors leave the omega-based
/// constants undefined and set `biased_warning`.
template <typename Scalar>
TheoryConstants compute_constants(const Problem<Scalar>& prob, const ProtocolCompressors& pc, double p,
                                  const StackedModel<Scalar>* x_star, long samples, std::uint64_t seed) {
  require_probability(p);
  TheoryConstants t;
  const auto sc = smoothness_constants(prob);
  t.L_f = sc.L_f;
  t.L = sc.L;
  t.mu = sc.mu;
  t.strongly_convex = sc.strongly_convex;
  t.p = p;
  t.lambda = static_cast<double>(prob.lambda);
  t.n = static_cast<double>(prob.n());

  t.biased_warning = !pc.all_unbiased();
  if (!t.biased_warning) {
    const auto vf = variance_factors(pc, prob.dim());
    t.omega = vf.omega;
    t.omega_m = vf.omega_m;
    t.alpha = alpha(t.omega, t.omega_m, t.mu);
  } else {
    t.alpha = std::numeric_limits<double>::quiet_NaN();
  }

  const double alpha_for_gamma = t.biased_warning ? 0.0 : t.alpha;
  t.gamma_lemma = gamma(p, t.lambda, t.n, t.L_f, alpha_for_gamma);
  t.gamma = pc.all_identity() ? gamma_uncompressed(p, t.lambda, t.n, t.L_f) : t.gamma_lemma;
  t.gamma_u = gamma_upper(p, t.lambda, t.n, t.L_f, alpha_for_gamma);
  t.stepsize_bound = 1.0 / (2.0 * t.gamma);
  if (t.mu > 0) t.contraction = 1.0 - t.stepsize_bound * t.mu / t.n;

  t.rate = optimal_p_rate(t.lambda, t.L, t.n, alpha_for_gamma);
  t.communication = optimal_p_communication(t.lambda, t.L, t.n, alpha_for_gamma);
  t.p_e_upper = optimal_p_rate_upper(t.lambda, t.L);

  if (x_star && !t.biased_warning) {
    t.have_optimum = true;
    t.beta = beta_estimate(prob, pc, *x_star, samples, seed);
    t.grad_sq_opt = grad_sq_at_optimum(prob, pc, *x_star, p, samples, seed + 1);
    t.delta = delta(t.beta.mean, t.lambda, t.n, p, t.grad_sq_opt.mean);
    const double beta_coeff = 2.0 * t.lambda * t.lambda * (1.0 - p) / (t.n * t.n * p);
    t.delta_std_error = std::hypot(beta_coeff * t.beta.std_error, 2.0 * t.grad_sq_opt.std_error);
    if (t.mu > 0) t.neighborhood = t.n * t.stepsize_bound * t.delta / t.mu;
  }
  return t;
}

}  // namespace cl2gd::theory

#endif  // CL2GD_THEORY_HPP_
