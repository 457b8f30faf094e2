#ifndef CL2GD_CONFIG_HPP_
#define CL2GD_CONFIG_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cl2gd/compressors.hpp"
#include "cl2gd/objective.hpp"

namespace cl2gd {

enum class Algorithm { L2gd, FedAvg };

/// Where the training data comes from.
///   libsvm     `path` to a LIBSVM file, padded to `d` columns
///   surrogate  built-in a1a/a2a-shaped table selected by `name`
///   synth      shifted-Gaussian clients (`per_client`, `heterogeneity`, `synth_seed`)
struct DatasetConfig {
  std::string source = "surrogate";
  std::string path;
  std::string name = "a1a";
  long d = 124;
  std::optional<std::uint64_t> shuffle_seed;  // absent: sequential split
  long per_client = 50;
  double heterogeneity = 1.0;
  std::uint64_t synth_seed = 0;

  bool operator==(const DatasetConfig&) const = default;
};

/// Every field has a default; p/lambda belong to l2gd and T to fedavg, so
/// those three stay empty until normalize() fills the ones that apply.
struct RunConfig {
  Algorithm algorithm = Algorithm::L2gd;
  DatasetConfig dataset;
  long n = 5;
  LossKind loss = LossKind::Logistic;
  double l2 = 0.01;
  std::optional<double> p;       // default 0.5
  std::optional<double> lambda;  // default 10
  std::optional<double> eta;     // empty means "auto"
  long K = 100;
  std::optional<long> T;  // default 5
  CompressorSpec client = CompressorSpec::identity();
  CompressorSpec master = CompressorSpec::identity();
  std::uint64_t seed = 0;
  long seeds = 1;
  long theory_samples = 10'000;
  double epsilon = 0.1;
  std::string out = "out";

  bool operator==(const RunConfig&) const = default;
};

struct SweepSpec {
  RunConfig base;
  std::vector<double> p_grid;
  std::vector<double> lambda_grid;
};

std::string algorithm_name(Algorithm a);
std::string loss_name(LossKind l);

/// Reads a config object, rejecting unknown keys and ill-typed values with
/// the offending field named. Throws ConfigError.
RunConfig parse_config(const nlohmann::json& j);

/// Fills algorithm-specific defaults and checks cross-field consistency.
RunConfig normalize(RunConfig cfg);

/// Full config including applied defaults; parse(serialize(c)) == c.
nlohmann::json serialize(const RunConfig& cfg);

/// Parses the `sweep` block ({"p": [...], "lambda": [...]}) next to the run
/// fields. Missing grids default to the single configured value.
SweepSpec parse_sweep(const nlohmann::json& j);
nlohmann::json serialize(const SweepSpec& spec);

/// Applies `a.b.c=value` assignments. The value is taken as JSON when it
/// parses, otherwise as a string.
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& assignments);

nlohmann::json load_json_file(const std::filesystem::path& path);

nlohmann::json compressor_to_json(const CompressorSpec& spec);
CompressorSpec compressor_from_json(const nlohmann::json& j, const std::string& field);

}  // namespace cl2gd

#endif  // CL2GD_CONFIG_HPP_
