#ifndef CL2GD_COMPRESSORS_HPP_
#define CL2GD_COMPRESSORS_HPP_

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cl2gd/errors.hpp"
#include "cl2gd/rng.hpp"
#include "cl2gd/stacked_model.hpp"

namespace cl2gd {

enum class CompressorKind { Identity, RandomDithering, Natural, TernGrad, Bernoulli, TopK };

/// Tagged description of one compression operator. Only the parameter that
/// belongs to `kind` is meaningful.
struct CompressorSpec {
  CompressorKind kind = CompressorKind::Identity;
  int levels = 1;          // RandomDithering: s >= 1
  double keep_prob = 1.0;  // Bernoulli: q in (0, 1]
  int k = 1;               // TopK: 1 <= k <= d
  std::uint64_t stream_id = 0;

  static CompressorSpec identity() { return {}; }
  static CompressorSpec dithering(int s) { CompressorSpec c; c.kind = CompressorKind::RandomDithering; c.levels = s; return c; }
  static CompressorSpec natural() { CompressorSpec c; c.kind = CompressorKind::Natural; return c; }
  static CompressorSpec terngrad() { CompressorSpec c; c.kind = CompressorKind::TernGrad; return c; }
  static CompressorSpec bernoulli(double q) { CompressorSpec c; c.kind = CompressorKind::Bernoulli; c.keep_prob = q; return c; }
  static CompressorSpec topk(int k) { CompressorSpec c; c.kind = CompressorKind::TopK; c.k = k; return c; }

  CompressorSpec with_stream(std::uint64_t id) const { CompressorSpec c = *this; c.stream_id = id; return c; }

  bool operator==(const CompressorSpec&) const = default;
};

inline std::string_view kind_name(CompressorKind kind) {
  switch (kind) {
    case CompressorKind::Identity: return "identity";
    case CompressorKind::RandomDithering: return "dithering";
    case CompressorKind::Natural: return "natural";
    case CompressorKind::TernGrad: return "terngrad";
    case CompressorKind::Bernoulli: return "bernoulli";
    case CompressorKind::TopK: return "topk";
  }
  return "?";
}

inline CompressorKind parse_kind(std::string_view name) {
  for (auto k : {CompressorKind::Identity, CompressorKind::RandomDithering, CompressorKind::Natural,
                 CompressorKind::TernGrad, CompressorKind::Bernoulli, CompressorKind::TopK}) {
    if (kind_name(k) == name) return k;
  }
  throw ConfigError("unknown compressor kind '" + std::string(name) +
                    "' (expected identity|dithering|natural|terngrad|bernoulli|topk)");
}

/// Human-readable one-liner, e.g. "bernoulli(q=0.5)".
inline std::string describe(const CompressorSpec& spec) {
  std::string out(kind_name(spec.kind));
  switch (spec.kind) {
    case CompressorKind::RandomDithering: out += "(s=" + std::to_string(spec.levels) + ")"; break;
    case CompressorKind::Bernoulli: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "(q=%g)", spec.keep_prob);
      out += buf;
      break;
    }
    case CompressorKind::TopK: out += "(k=" + std::to_string(spec.k) + ")"; break;
    default: break;
  }
  return out;
}

inline bool is_unbiased(const CompressorSpec& spec) { return spec.kind != CompressorKind::TopK; }

/// Throws ConfigError when the parameters are out of range for dimension d.
inline void validate(const CompressorSpec& spec, Eigen::Index d) {
  switch (spec.kind) {
    case CompressorKind::RandomDithering:
      if (spec.levels < 1) throw ConfigError("dithering levels s must be >= 1, got " + std::to_string(spec.levels));
      break;
    case CompressorKind::Bernoulli:
      if (!(spec.keep_prob > 0.0 && spec.keep_prob <= 1.0))
        throw ConfigError("bernoulli keep probability q must lie in (0, 1], got " + std::to_string(spec.keep_prob));
      break;
    case CompressorKind::TopK:
      if (spec.k < 1 || spec.k > d)
        throw ConfigError("top-k requires 1 <= k <= d (k=" + std::to_string(spec.k) + ", d=" + std::to_string(d) + ")");
      break;
    default: break;
  }
}

/// Bits needed to address one of d coordinates.
inline std::uint64_t index_bits(Eigen::Index d) {
  return d <= 1 ? 0 : std::bit_width(static_cast<std::uint64_t>(d - 1));
}

/// Bit-accounting contract. Identity: 32/coord. Dithering: 32-bit norm plus
/// sign and ceil(log2(s+1)) level bits per coord. Natural: sign + 8-bit
/// exponent per coord. TernGrad: 32-bit scale plus 2 bits per coord.
/// Bernoulli/TopK: (32-bit value, index) pairs for the surviving nonzeros.
inline std::uint64_t bit_cost(const CompressorSpec& spec, Eigen::Index d, Eigen::Index nnz) {
  const auto dd = static_cast<std::uint64_t>(d);
  switch (spec.kind) {
    case CompressorKind::Identity: return 32 * dd;
    case CompressorKind::RandomDithering:
      return 32 + dd * (1 + index_bits(static_cast<Eigen::Index>(spec.levels) + 1));
    case CompressorKind::Natural: return 9 * dd;
    case CompressorKind::TernGrad: return 32 + 2 * dd;
    case CompressorKind::Bernoulli:
    case CompressorKind::TopK: return static_cast<std::uint64_t>(nnz) * (32 + index_bits(d));
  }
  return 0;
}

/// Analytic bound omega with E||C(x) - x||^2 <= omega ||x||^2.
///
///   identity   0
///   dithering  min(d/s^2, sqrt(d)/s)
///   natural    1/8
///   terngrad   (sqrt(d) - 1)/2
///   bernoulli  (1 - q)/q
///
/// The TernGrad value is the supremum of (max|x_i| ||x||_1 - ||x||^2)/||x||^2,
/// attained with one coordinate at the max and the rest at max/(sqrt(d)+1).
inline double variance_factor(const CompressorSpec& spec, Eigen::Index d) {
  validate(spec, d);
  const double dd = static_cast<double>(d);
  switch (spec.kind) {
    case CompressorKind::Identity: return 0.0;
    case CompressorKind::RandomDithering: {
      const double s = spec.levels;
      return std::min(dd / (s * s), std::sqrt(dd) / s);
    }
    case CompressorKind::Natural: return 1.0 / 8.0;
    case CompressorKind::TernGrad: return (std::sqrt(dd) - 1.0) / 2.0;
    case CompressorKind::Bernoulli: return (1.0 - spec.keep_prob) / spec.keep_prob;
    case CompressorKind::TopK: break;
  }
  throw ConfigError("no unbiased variance certificate for biased compressor " + describe(spec));
}

/// omega = max_i omega_i for the block operator C = (C_1, ..., C_n).
inline double joint_variance_factor(std::span<const CompressorSpec> specs, Eigen::Index d) {
  double omega = 0.0;
  for (const auto& s : specs) omega = std::max(omega, variance_factor(s, d));
  return omega;
}

template <typename Scalar>
struct CompressedMessage {
  Vector<Scalar> payload;  // decoded form
  Eigen::Index nnz = 0;
  std::uint64_t bit_cost = 0;
};

namespace detail {

template <typename Scalar, typename Derived>
void dither(const Eigen::MatrixBase<Derived>& x, int s, Stream& rng, Vector<Scalar>& out) {
  const Scalar norm = x.norm();
  if (norm == Scalar(0)) return;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double r = static_cast<double>(s) * std::abs(static_cast<double>(x[i])) / static_cast<double>(norm);
    double level = std::floor(r);
    if (level < s && rng.uniform() < r - level) level += 1.0;
    const Scalar mag = norm * static_cast<Scalar>(level / s);
    out[i] = x[i] < 0 ? -mag : mag;
  }
}

template <typename Scalar, typename Derived>
void natural(const Eigen::MatrixBase<Derived>& x, Stream& rng, Vector<Scalar>& out) {
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar v = x[i];
    if (v == Scalar(0)) continue;
    int e = 0;
    std::frexp(std::abs(v), &e);  // |v| in [2^(e-1), 2^e)
    const Scalar low = std::ldexp(Scalar(1), e - 1);
    const double up = static_cast<double>((std::abs(v) - low) / low);
    const Scalar mag = (up > 0.0 && rng.uniform() < up) ? low * Scalar(2) : low;
    out[i] = v < 0 ? -mag : mag;
  }
}

template <typename Scalar, typename Derived>
void terngrad(const Eigen::MatrixBase<Derived>& x, Stream& rng, Vector<Scalar>& out) {
  const Scalar m = x.cwiseAbs().maxCoeff();
  if (m == Scalar(0)) return;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double prob = static_cast<double>(std::abs(x[i]) / m);
    if (prob > 0.0 && rng.uniform() < prob) out[i] = x[i] < 0 ? -m : m;
  }
}

template <typename Scalar, typename Derived>
void bernoulli(const Eigen::MatrixBase<Derived>& x, double q, Stream& rng, Vector<Scalar>& out) {
  const Scalar scale = static_cast<Scalar>(1.0 / q);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    // Always draw so the mask stream does not depend on the values.
    if (rng.uniform() < q) out[i] = x[i] * scale;
  }
}

template <typename Scalar, typename Derived>
void topk(const Eigen::MatrixBase<Derived>& x, int k, Vector<Scalar>& out) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    const Scalar ma = std::abs(x[a]), mb = std::abs(x[b]);
    return ma > mb || (ma == mb && a < b);
  });
  for (int j = 0; j < k; ++j) out[idx[j]] = x[idx[j]];
}

}  // namespace detail

/// Applies the operator described by `spec` to x, drawing randomness from
/// `rng`. All operators map 0 to 0; zero-norm input to dithering/terngrad
/// draws nothing.
template <typename Derived>
CompressedMessage<typename Derived::Scalar> compress(const CompressorSpec& spec,
                                                     const Eigen::MatrixBase<Derived>& x, Stream& rng) {
  using Scalar = typename Derived::Scalar;
  validate(spec, x.size());
  if (!x.allFinite()) throw InvariantError("compress: non-finite input to " + describe(spec));

  CompressedMessage<Scalar> msg;
  msg.payload = Vector<Scalar>::Zero(x.size());
  switch (spec.kind) {
    case CompressorKind::Identity: msg.payload = x; break;
    case CompressorKind::RandomDithering: detail::dither<Scalar>(x, spec.levels, rng, msg.payload); break;
    case CompressorKind::Natural: detail::natural<Scalar>(x, rng, msg.payload); break;
    case CompressorKind::TernGrad: detail::terngrad<Scalar>(x, rng, msg.payload); break;
    case CompressorKind::Bernoulli: detail::bernoulli<Scalar>(x, spec.keep_prob, rng, msg.payload); break;
    case CompressorKind::TopK: detail::topk<Scalar>(x, spec.k, msg.payload); break;
  }
  msg.nnz = (msg.payload.array() != Scalar(0)).count();
  msg.bit_cost = bit_cost(spec, x.size(), msg.nnz);
  return msg;
}

}  // namespace cl2gd

#endif  // CL2GD_COMPRESSORS_HPP_
