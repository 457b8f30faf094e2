#include "cl2gd/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cl2gd/errors.hpp"
#include "cl2gd/rng.hpp"

namespace cl2gd::data {

namespace {

[[noreturn]] void fail(std::size_t line, const std::string& what) {
  throw DataError("line " + std::to_string(line) + ": " + what);
}

bool is_space(char c) { return c == ' ' || c == '\t'; }

int parse_label(std::string_view tok, std::size_t line) {
  if (tok == "1" || tok == "+1") return 1;
  if (tok == "-1") return -1;
  fail(line, "label must be 1, +1 or -1, got '" + std::string(tok) + "'");
}

}  // namespace

std::vector<std::size_t> PartitionedDataset::sizes() const {
  std::vector<std::size_t> out;
  out.reserve(clients.size());
  for (const auto& c : clients) out.push_back(c.size());
  return out;
}

std::size_t PartitionedDataset::total() const {
  std::size_t t = 0;
  for (const auto& c : clients) t += c.size();
  return t;
}

Dataset parse_libsvm(std::istream& in, std::optional<Eigen::Index> target_d) {
  Dataset ds;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line(raw);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find('#') != std::string_view::npos) fail(line_no, "comments are not supported");
    if (std::all_of(line.begin(), line.end(), is_space)) continue;

    std::vector<std::string_view> tokens;
    std::size_t pos = 0;
    while (pos < line.size()) {
      while (pos < line.size() && is_space(line[pos])) ++pos;
      std::size_t end = pos;
      while (end < line.size() && !is_space(line[end])) ++end;
      if (end > pos) tokens.push_back(line.substr(pos, end - pos));
      pos = end;
    }

    LabeledExample ex;
    ex.label = parse_label(tokens.front(), line_no);
    Eigen::Index prev = -1;
    for (std::size_t t = 1; t < tokens.size(); ++t) {
      const auto tok = tokens[t];
      const auto colon = tok.find(':');
      if (colon == std::string_view::npos || colon == 0 || colon + 1 == tok.size())
        fail(line_no, "malformed feature '" + std::string(tok) + "'");
      long long idx = 0;
      const auto ir = std::from_chars(tok.data(), tok.data() + colon, idx);
      if (ir.ec != std::errc() || ir.ptr != tok.data() + colon || idx < 1)
        fail(line_no, "bad feature index in '" + std::string(tok) + "'");
      double val = 0;
      const char* vbeg = tok.data() + colon + 1;
      const char* vend = tok.data() + tok.size();
      if (*vbeg == '+') ++vbeg;
      const auto vr = std::from_chars(vbeg, vend, val);
      if (vr.ec != std::errc() || vr.ptr != vend || !std::isfinite(val))
        fail(line_no, "bad feature value in '" + std::string(tok) + "'");
      const Eigen::Index zero_based = static_cast<Eigen::Index>(idx - 1);
      if (zero_based <= prev) fail(line_no, "feature indices must be strictly increasing");
      prev = zero_based;
      ex.features.emplace_back(zero_based, val);
    }
    ds.dim = std::max(ds.dim, prev + 1);
    ds.examples.push_back(std::move(ex));
  }
  if (target_d) {
    if (*target_d < ds.dim)
      throw DataError("data has " + std::to_string(ds.dim) + " features, more than target d=" +
                      std::to_string(*target_d));
    ds.dim = *target_d;
  }
  return ds;
}

Dataset parse_libsvm_string(const std::string& text, std::optional<Eigen::Index> target_d) {
  std::istringstream in(text);
  return parse_libsvm(in, target_d);
}

Dataset load_libsvm(const std::filesystem::path& path, std::optional<Eigen::Index> target_d) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  try {
    return parse_libsvm(in, target_d);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string serialize_libsvm(const Dataset& ds) {
  std::string out;
  char buf[64];
  for (const auto& ex : ds.examples) {
    out += ex.label > 0 ? "+1" : "-1";
    for (const auto& [idx, val] : ex.features) {
      out += ' ';
      out += std::to_string(idx + 1);
      out += ':';
      const auto r = std::to_chars(buf, buf + sizeof buf, val);
      out.append(buf, r.ptr);
    }
    out += '\n';
  }
  return out;
}

PartitionedDataset partition_sequential(const Dataset& ds, std::size_t n) {
  if (n < 1) throw ConfigError("number of clients must be >= 1");
  if (n > ds.size())
    throw DataError("cannot split " + std::to_string(ds.size()) + " examples across " + std::to_string(n) + " clients");
  PartitionedDataset out;
  out.dim = ds.dim;
  out.clients.resize(n);
  const std::size_t base = ds.size() / n, extra = ds.size() % n;
  std::size_t at = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t take = base + (i < extra ? 1 : 0);
    out.clients[i].assign(ds.examples.begin() + static_cast<std::ptrdiff_t>(at),
                          ds.examples.begin() + static_cast<std::ptrdiff_t>(at + take));
    at += take;
  }
  return out;
}

PartitionedDataset partition_shuffled(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  Dataset shuffled = ds;
  Stream rng(seed, stream::kInit);
  for (std::size_t i = shuffled.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(shuffled.examples[i - 1], shuffled.examples[j]);
  }
  return partition_sequential(shuffled, n);
}

PartitionedDataset synth_instance(const SynthSpec& spec) {
  if (spec.n < 1 || spec.d < 1 || spec.per_client < 1) throw ConfigError("synthetic instance needs positive sizes");
  Stream shared(spec.seed, stream::kInit);
  Eigen::VectorXd w0(spec.d);
  for (auto& v : w0) v = shared.normal();

  PartitionedDataset out;
  out.dim = spec.d;
  out.clients.resize(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    Stream rng(spec.seed, stream::kClientBase + i);
    Eigen::VectorXd shift(spec.d), w(spec.d);
    for (auto& v : shift) v = rng.normal();
    for (auto& v : w) v = rng.normal();
    shift *= spec.heterogeneity;
    w = w0 + spec.heterogeneity * w;
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.d));
    for (std::size_t j = 0; j < spec.per_client; ++j) {
      LabeledExample ex;
      Eigen::VectorXd a(spec.d);
      for (Eigen::Index c = 0; c < spec.d; ++c) a[c] = shift[c] + rng.normal();
      const double margin = scale * a.dot(w);
      ex.label = rng.uniform() < 1.0 / (1.0 + std::exp(-margin)) ? 1 : -1;
      for (Eigen::Index c = 0; c < spec.d; ++c) ex.features.emplace_back(c, a[c]);
      out.clients[i].push_back(std::move(ex));
    }
  }
  return out;
}

Dataset adult_surrogate(std::size_t rows, std::uint64_t seed) {
  // Attribute cardinalities of the binarized adult table, in column order.
  static constexpr int kGroups[] = {5, 8, 5, 16, 5, 7, 14, 6, 5, 2, 2, 2, 5, 41};
  static constexpr double kMissing[] = {0, 0.05, 0, 0, 0, 0, 0.05, 0, 0, 0, 0, 0, 0, 0.02};
  constexpr std::size_t kCount = std::size(kGroups);

  Stream design(seed, stream::kInit);
  std::vector<std::vector<double>> cdf(kCount);
  std::vector<int> offset(kCount);
  int total_features = 0;
  for (std::size_t g = 0; g < kCount; ++g) {
    offset[g] = total_features;
    total_features += kGroups[g];
    std::vector<double> w(static_cast<std::size_t>(kGroups[g]));
    for (std::size_t c = 0; c < w.size(); ++c) w[c] = 1.0 / std::pow(static_cast<double>(c) + 1.0, 1.1);
    for (std::size_t c = w.size(); c > 1; --c) std::swap(w[c - 1], w[static_cast<std::size_t>(design.below(c))]);
    std::partial_sum(w.begin(), w.end(), w.begin());
    for (auto& v : w) v /= w.back();
    cdf[g] = std::move(w);
  }
  std::vector<double> weight(static_cast<std::size_t>(total_features));
  for (auto& v : weight) v = 0.8 * design.normal();

  Dataset ds;
  ds.dim = total_features;
  std::vector<double> logits;
  Stream rows_rng(seed, stream::kClientBase);
  for (std::size_t r = 0; r < rows; ++r) {
    LabeledExample ex;
    double logit = 0;
    for (std::size_t g = 0; g < kCount; ++g) {
      if (kMissing[g] > 0 && rows_rng.uniform() < kMissing[g]) continue;
      const double u = rows_rng.uniform();
      const auto c = static_cast<int>(std::upper_bound(cdf[g].begin(), cdf[g].end() - 1, u) - cdf[g].begin());
      const int idx = offset[g] + c;
      ex.features.emplace_back(idx, 1.0);
      logit += weight[static_cast<std::size_t>(idx)];
    }
    logits.push_back(logit);
    ds.examples.push_back(std::move(ex));
  }

  // Intercept chosen by bisection so the expected positive rate is 0.24.
  auto rate = [&](double b) {
    double s = 0;
    for (double t : logits) s += 1.0 / (1.0 + std::exp(-(t + b)));
    return s / static_cast<double>(std::max<std::size_t>(1, logits.size()));
  };
  double lo = -20, hi = 20;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (rate(mid) < 0.24 ? lo : hi) = mid;
  }
  const double bias = 0.5 * (lo + hi);
  Stream label_rng(seed, stream::kCoin);
  for (std::size_t r = 0; r < rows; ++r) {
    const double prob = 1.0 / (1.0 + std::exp(-(logits[r] + bias)));
    ds.examples[r].label = label_rng.uniform() < prob ? 1 : -1;
  }
  return ds;
}

Dataset adult_surrogate(const std::string& name) {
  if (name == "a1a") return adult_surrogate(1605, 0xA1A);
  if (name == "a2a") return adult_surrogate(2265, 0xA2A);
  throw ConfigError("unknown surrogate dataset '" + name + "' (expected a1a|a2a)");
}

Problem<double> to_problem(const PartitionedDataset& parts, double l2, double lambda, LossKind loss) {
  Problem<double> prob;
  prob.l2 = l2;
  prob.lambda = lambda;
  prob.loss = loss;
  for (const auto& client : parts.clients) {
    ClientData<double> c;
    c.features = RowMatrix<double>::Zero(static_cast<Eigen::Index>(client.size()), parts.dim);
    c.labels.resize(static_cast<Eigen::Index>(client.size()));
    for (std::size_t j = 0; j < client.size(); ++j) {
      const auto row = static_cast<Eigen::Index>(j);
      c.labels[row] = client[j].label;
      for (const auto& [idx, val] : client[j].features) c.features(row, idx) = val;
    }
    prob.clients.push_back(std::move(c));
  }
  prob.validate();
  return prob;
}

}  // namespace cl2gd::data
