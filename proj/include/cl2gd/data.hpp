#ifndef CL2GD_DATA_HPP_
#define CL2GD_DATA_HPP_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cl2gd/objective.hpp"

namespace cl2gd::data {

/// One LIBSVM row. Indices are 0-based and strictly increasing.
struct LabeledExample {
  std::vector<std::pair<Eigen::Index, double>> features;
  int label = 1;

  bool operator==(const LabeledExample&) const = default;
};

struct Dataset {
  std::vector<LabeledExample> examples;
  Eigen::Index dim = 0;

  std::size_t size() const { return examples.size(); }
};

struct PartitionedDataset {
  std::vector<std::vector<LabeledExample>> clients;
  Eigen::Index dim = 0;

  std::size_t n() const { return clients.size(); }
  std::vector<std::size_t> sizes() const;
  std::size_t total() const;
};

/// Parses `label idx:val ...` lines (LF or CRLF). Labels "1", "+1", "-1".
/// dim is the largest index seen, raised to target_d when given. Throws
/// DataError naming the offending line.
Dataset parse_libsvm(std::istream& in, std::optional<Eigen::Index> target_d = std::nullopt);
Dataset parse_libsvm_string(const std::string& text, std::optional<Eigen::Index> target_d = std::nullopt);
Dataset load_libsvm(const std::filesystem::path& path, std::optional<Eigen::Index> target_d = std::nullopt);

/// Inverse of parse_libsvm on the sparse representation (shortest
/// round-trip value formatting).
std::string serialize_libsvm(const Dataset& ds);

/// Contiguous blocks in file order; the first (size mod n) clients get one
/// extra example.
PartitionedDataset partition_sequential(const Dataset& ds, std::size_t n);

/// Seeded permutation followed by partition_sequential.
PartitionedDataset partition_shuffled(const Dataset& ds, std::size_t n, std::uint64_t seed);

struct SynthSpec {
  std::size_t n = 5;
  Eigen::Index d = 10;
  std::size_t per_client = 50;
  double heterogeneity = 1.0;
  std::uint64_t seed = 0;
};

/// Client i draws features from N(heterogeneity * m_i, I) and labels from a
/// logistic model around w_0 + heterogeneity * u_i, with m_i, u_i, w_0
/// standard normal.
PartitionedDataset synth_instance(const SynthSpec& spec);

/// Binary one-hot census-style table shaped like the LIBSVM adult subsets
/// (123 indicator features over 14 attributes, about a quarter positive).
/// Stand-in for a1a (1605 rows) and a2a (2265 rows) when the real files are
/// not available.
Dataset adult_surrogate(std::size_t rows, std::uint64_t seed);
Dataset adult_surrogate(const std::string& name);

/// Dense problem with one client per partition block.
Problem<double> to_problem(const PartitionedDataset& parts, double l2, double lambda,
                           LossKind loss = LossKind::Logistic);

}  // namespace cl2gd::data

#endif  // CL2GD_DATA_HPP_
