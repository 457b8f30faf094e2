#ifndef CL2GD_OBJECTIVE_HPP_
#define CL2GD_OBJECTIVE_HPP_

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cl2gd/errors.hpp"
#include "cl2gd/stacked_model.hpp"

namespace cl2gd {

enum class LossKind {
  Logistic,        // log(1 + exp(-b a^T x)), convex
  SigmoidSquared,  // 0.5 (sigma(a^T x) - y)^2 with y = (b + 1)/2, nonconvex
};

/// One client's shard: rows of `features` are examples, labels are +1/-1.
template <typename Scalar>
struct ClientData {
  RowMatrix<Scalar> features;
  Vector<Scalar> labels;

  Eigen::Index size() const { return features.rows(); }
};

/// Personalized objective F(x) = f(x) + h(x) with
///   f(x) = (1/n) sum_i f_i(x_i),   h(x) = (lambda / 2n) sum_i ||x_i - xbar||^2,
/// and f_i the mean loss over client i's shard plus (l2/2)||x_i||^2.
template <typename Scalar>
struct Problem {
  std::vector<ClientData<Scalar>> clients;
  Scalar l2 = 0;
  Scalar lambda = 0;
  LossKind loss = LossKind::Logistic;

  Eigen::Index n() const { return static_cast<Eigen::Index>(clients.size()); }
  Eigen::Index dim() const { return clients.empty() ? 0 : clients.front().features.cols(); }

  /// Throws ConfigError/DataError when the instance is unusable.
  void validate() const {
    if (clients.empty()) throw DataError("problem has no clients");
    const auto d = dim();
    for (std::size_t i = 0; i < clients.size(); ++i) {
      if (clients[i].size() < 1) throw DataError("client " + std::to_string(i) + " holds no examples");
      if (clients[i].features.cols() != d) throw DataError("client " + std::to_string(i) + " has mismatched dimension");
      if (clients[i].labels.size() != clients[i].size())
        throw DataError("client " + std::to_string(i) + " label count mismatch");
    }
    if (!(l2 >= 0)) throw ConfigError("l2 must be >= 0");
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
  }
};

namespace detail {

/// log(1 + exp(t)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar t) {
  if (t > Scalar(30)) return t + std::log1p(std::exp(-t));
  return std::log1p(std::exp(t));
}

template <typename Scalar>
Scalar sigmoid(Scalar t) {
  if (t >= 0) return Scalar(1) / (Scalar(1) + std::exp(-t));
  const Scalar e = std::exp(t);
  return e / (Scalar(1) + e);
}

}  // namespace detail

/// Upper bound on |l''(t)| for the per-example loss as a function of the
/// margin t = a^T x.
inline double curvature_bound(LossKind loss) {
  switch (loss) {
    case LossKind::Logistic: return 0.25;
    case LossKind::SigmoidSquared: return 1.0 / 16.0 + 1.0 / (6.0 * std::sqrt(3.0));
  }
  return 0.0;
}

/// f_i(x_i).
template <typename Scalar, typename Derived>
Scalar local_loss(const Problem<Scalar>& prob, Eigen::Index i, const Eigen::MatrixBase<Derived>& xi) {
  const auto& c = prob.clients[static_cast<std::size_t>(i)];
  const Vector<Scalar> margins = c.features * xi;
  Scalar sum = 0;
  for (Eigen::Index j = 0; j < margins.size(); ++j) {
    if (prob.loss == LossKind::Logistic) {
      sum += detail::softplus(-c.labels[j] * margins[j]);
    } else {
      const Scalar y = (c.labels[j] + Scalar(1)) / Scalar(2);
      const Scalar r = detail::sigmoid(margins[j]) - y;
      sum += Scalar(0.5) * r * r;
    }
  }
  return sum / static_cast<Scalar>(c.size()) + prob.l2 / Scalar(2) * xi.squaredNorm();
}

/// grad f_i(x_i).
template <typename Scalar, typename Derived>
Vector<Scalar> local_gradient(const Problem<Scalar>& prob, Eigen::Index i, const Eigen::MatrixBase<Derived>& xi) {
  const auto& c = prob.clients[static_cast<std::size_t>(i)];
  const Vector<Scalar> margins = c.features * xi;
  Vector<Scalar> w(margins.size());
  for (Eigen::Index j = 0; j < margins.size(); ++j) {
    if (prob.loss == LossKind::Logistic) {
      w[j] = -c.labels[j] * detail::sigmoid(-c.labels[j] * margins[j]);
    } else {
      const Scalar y = (c.labels[j] + Scalar(1)) / Scalar(2);
      const Scalar s = detail::sigmoid(margins[j]);
      w[j] = (s - y) * s * (Scalar(1) - s);
    }
  }
  Vector<Scalar> g = c.features.transpose() * w;
  g /= static_cast<Scalar>(c.size());
  g += prob.l2 * xi;
  return g;
}

template <typename Scalar>
Scalar f_value(const Problem<Scalar>& prob, const StackedModel<Scalar>& x) {
  Scalar sum = 0;
  for (Eigen::Index i = 0; i < prob.n(); ++i) sum += local_loss(prob, i, x.block(i));
  return sum / static_cast<Scalar>(prob.n());
}

/// Block i is (1/n) grad f_i(x_i).
template <typename Scalar>
StackedModel<Scalar> f_gradient(const Problem<Scalar>& prob, const StackedModel<Scalar>& x) {
  StackedModel<Scalar> g(prob.n(), prob.dim());
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(prob.n());
  for (Eigen::Index i = 0; i < prob.n(); ++i) g.block(i) = inv_n * local_gradient(prob, i, x.block(i));
  return g;
}

template <typename Scalar>
Scalar h_value(Scalar lambda, const StackedModel<Scalar>& x) {
  return lambda / (Scalar(2) * static_cast<Scalar>(x.clients())) * consensus_distance(x);
}

/// Block i is (lambda/n)(x_i - xbar).
template <typename Scalar>
StackedModel<Scalar> h_gradient(Scalar lambda, const StackedModel<Scalar>& x) {
  Matrix<Scalar> g = x.blocks().colwise() - x.average();
  g *= lambda / static_cast<Scalar>(x.clients());
  return StackedModel<Scalar>(std::move(g));
}

template <typename Scalar>
Scalar F_value(const Problem<Scalar>& prob, const StackedModel<Scalar>& x) {
  return f_value(prob, x) + h_value(prob.lambda, x);
}

template <typename Scalar>
StackedModel<Scalar> F_gradient(const Problem<Scalar>& prob, const StackedModel<Scalar>& x) {
  return f_gradient(prob, x) + h_gradient(prob.lambda, x);
}

struct SmoothnessConstants {
  double L_f = 0;  // smoothness of f on R^{nd}
  double L = 0;    // n * L_f
  double mu = 0;   // strong convexity of f (0 when not strongly convex)
  bool strongly_convex = false;
};

/// L_f = (1/n) max_i (c * sigma_max(A_i^T A_i) / n_i + l2), mu = l2 / n,
/// where c bounds the loss curvature (1/4 for logistic).
template <typename Scalar>
SmoothnessConstants smoothness_constants(const Problem<Scalar>& prob) {
  prob.validate();
  const double c = curvature_bound(prob.loss);
  double worst = 0;
  for (const auto& client : prob.clients) {
    const Matrix<double> gram = (client.features.transpose() * client.features).template cast<double>();
    Eigen::SelfAdjointEigenSolver<Matrix<double>> es(gram, Eigen::EigenvaluesOnly);
    const double sigma_max = es.eigenvalues().maxCoeff();
    worst = std::max(worst, c * sigma_max / static_cast<double>(client.size()) + static_cast<double>(prob.l2));
  }
  SmoothnessConstants out;
  const double n = static_cast<double>(prob.n());
  out.L_f = worst / n;
  out.L = worst;
  out.strongly_convex = prob.loss == LossKind::Logistic && prob.l2 > 0;
  out.mu = out.strongly_convex ? static_cast<double>(prob.l2) / n : 0.0;
  return out;
}

template <typename Scalar>
struct OptimumResult {
  StackedModel<Scalar> x;
  Scalar grad_norm = 0;
  long iterations = 0;
  bool converged = false;
};

/// Minimizer of F by Nesterov-accelerated full-gradient descent with step
/// 1/(L_f + 2 lambda/n), stopping when ||grad F|| <= tol. For strongly convex
/// instances the constant momentum (sqrt(kappa)-1)/(sqrt(kappa)+1) is used;
/// otherwise plain gradient descent.
template <typename Scalar>
OptimumResult<Scalar> solve_optimum(const Problem<Scalar>& prob, double tol = 1e-10, long max_iter = 2'000'000,
                                    const StackedModel<Scalar>* start = nullptr) {
  const auto sc = smoothness_constants(prob);
  const double smooth = sc.L_f + 2.0 * static_cast<double>(prob.lambda) / static_cast<double>(prob.n());
  const Scalar step = static_cast<Scalar>(1.0 / smooth);
  Scalar momentum = 0;
  if (sc.strongly_convex) {
    const double root_kappa = std::sqrt(smooth / sc.mu);
    momentum = static_cast<Scalar>((root_kappa - 1.0) / (root_kappa + 1.0));
  }

  OptimumResult<Scalar> out;
  StackedModel<Scalar> x = start ? *start : StackedModel<Scalar>::Zero(prob.n(), prob.dim());
  StackedModel<Scalar> prev = x;
  for (long it = 0; it < max_iter; ++it) {
    const StackedModel<Scalar> g_at_x = F_gradient(prob, x);
    const Scalar gn = g_at_x.norm();
    if (gn <= tol) {
      out.grad_norm = gn;
      out.iterations = it;
      out.converged = true;
      out.x = std::move(x);
      return out;
    }
    if (momentum == Scalar(0)) {
      x -= step * g_at_x;
      continue;
    }
    const StackedModel<Scalar> y = x + momentum * (x - prev);
    prev = x;
    x = y - step * F_gradient(prob, y);
  }
  out.grad_norm = F_gradient(prob, x).norm();
  out.iterations = max_iter;
  out.converged = out.grad_norm <= tol;
  out.x = std::move(x);
  return out;
}

/// 0/1 accuracy of model w on a shard (margin > 0 predicts +1).
template <typename Scalar, typename Derived>
double accuracy(const ClientData<Scalar>& data, const Eigen::MatrixBase<Derived>& w) {
  const Vector<Scalar> margins = data.features * w;
  Eigen::Index hits = 0;
  for (Eigen::Index j = 0; j < margins.size(); ++j) hits += ((margins[j] > 0 ? 1 : -1) == data.labels[j]) ? 1 : 0;
  return data.size() ? static_cast<double>(hits) / static_cast<double>(data.size()) : 0.0;
}

struct AccuracyReport {
  std::vector<double> personalized;  // model i on shard i
  double personalized_mean = 0;      // example-weighted
  double averaged_pooled = 0;        // xbar on the union of shards
};

template <typename Scalar>
AccuracyReport accuracy_report(const Problem<Scalar>& prob, const StackedModel<Scalar>& x) {
  AccuracyReport r;
  const Vector<Scalar> avg = x.average();
  double hits_personal = 0, hits_avg = 0, total = 0;
  for (Eigen::Index i = 0; i < prob.n(); ++i) {
    const auto& c = prob.clients[static_cast<std::size_t>(i)];
    const double acc = accuracy(c, x.block(i));
    r.personalized.push_back(acc);
    hits_personal += acc * static_cast<double>(c.size());
    hits_avg += accuracy(c, avg) * static_cast<double>(c.size());
    total += static_cast<double>(c.size());
  }
  r.personalized_mean = hits_personal / total;
  r.averaged_pooled = hits_avg / total;
  return r;
}

}  // namespace cl2gd

#endif  // CL2GD_OBJECTIVE_HPP_
