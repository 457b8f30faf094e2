#include "cl2gd/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "cl2gd/errors.hpp"

namespace cl2gd {

using nlohmann::json;

namespace {

[[noreturn]] void bad(const std::string& field, const std::string& what) {
  throw ConfigError("config field '" + field + "': " + what);
}

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items()) {
    if (!ok.count(key)) bad(where.empty() ? key : where + "." + key, "unknown key");
  }
}

const json* find(const json& j, const char* key) {
  const auto it = j.find(key);
  return it == j.end() ? nullptr : &*it;
}

double get_number(const json& v, const std::string& field) {
  if (!v.is_number()) bad(field, "expected a number, got " + v.dump());
  return v.get<double>();
}

long get_integer(const json& v, const std::string& field) {
  if (!v.is_number_integer()) bad(field, "expected an integer, got " + v.dump());
  return v.get<long>();
}

std::uint64_t get_unsigned(const json& v, const std::string& field) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0))
    bad(field, "expected a non-negative integer, got " + v.dump());
  return v.get<std::uint64_t>();
}

std::string get_string(const json& v, const std::string& field) {
  if (!v.is_string()) bad(field, "expected a string, got " + v.dump());
  return v.get<std::string>();
}

std::vector<double> get_grid(const json& v, const std::string& field) {
  if (!v.is_array() || v.empty()) bad(field, "expected a non-empty list of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(get_number(v[i], field + "[" + std::to_string(i) + "]"));
  return out;
}

DatasetConfig parse_dataset(const json& j) {
  if (!j.is_object()) bad("dataset", "expected an object");
  reject_unknown(j, "dataset",
                 {"source", "path", "name", "d", "shuffle_seed", "per_client", "heterogeneity", "synth_seed"});
  DatasetConfig d;
  if (auto v = find(j, "source")) d.source = get_string(*v, "dataset.source");
  if (auto v = find(j, "path")) d.path = get_string(*v, "dataset.path");
  if (auto v = find(j, "name")) d.name = get_string(*v, "dataset.name");
  if (auto v = find(j, "d")) d.d = get_integer(*v, "dataset.d");
  if (auto v = find(j, "shuffle_seed"); v && !v->is_null()) d.shuffle_seed = get_unsigned(*v, "dataset.shuffle_seed");
  if (auto v = find(j, "per_client")) d.per_client = get_integer(*v, "dataset.per_client");
  if (auto v = find(j, "heterogeneity")) d.heterogeneity = get_number(*v, "dataset.heterogeneity");
  if (auto v = find(j, "synth_seed")) d.synth_seed = get_unsigned(*v, "dataset.synth_seed");
  return d;
}

json dataset_to_json(const DatasetConfig& d) {
  json j;
  j["source"] = d.source;
  j["path"] = d.path;
  j["name"] = d.name;
  j["d"] = d.d;
  j["shuffle_seed"] = d.shuffle_seed ? json(*d.shuffle_seed) : json(nullptr);
  j["per_client"] = d.per_client;
  j["heterogeneity"] = d.heterogeneity;
  j["synth_seed"] = d.synth_seed;
  return j;
}

const char* const kRunKeys[] = {"algorithm", "dataset", "n",      "loss",   "l2",    "p",
                                "lambda",    "eta",     "K",      "T",      "compressors",
                                "seed",      "seeds",   "theory", "out"};

}  // namespace

std::string algorithm_name(Algorithm a) { return a == Algorithm::L2gd ? "l2gd" : "fedavg"; }

std::string loss_name(LossKind l) { return l == LossKind::Logistic ? "logistic" : "sigmoid_squared"; }

json compressor_to_json(const CompressorSpec& spec) {
  json j;
  j["kind"] = std::string(kind_name(spec.kind));
  switch (spec.kind) {
    case CompressorKind::RandomDithering: j["s"] = spec.levels; break;
    case CompressorKind::Bernoulli: j["q"] = spec.keep_prob; break;
    case CompressorKind::TopK: j["k"] = spec.k; break;
    default: break;
  }
  return j;
}

CompressorSpec compressor_from_json(const json& j, const std::string& field) {
  CompressorSpec spec;
  if (j.is_string()) {
    try {
      spec.kind = parse_kind(j.get<std::string>());
    } catch (const ConfigError& e) {
      bad(field, e.what());
    }
  } else if (j.is_object()) {
    reject_unknown(j, field, {"kind", "s", "q", "k"});
    const json* kind = find(j, "kind");
    if (!kind) bad(field + ".kind", "missing");
    try {
      spec.kind = parse_kind(get_string(*kind, field + ".kind"));
    } catch (const ConfigError& e) {
      bad(field + ".kind", e.what());
    }
    const auto expect_only = [&](const char* key, CompressorKind owner) {
      if (find(j, key) && spec.kind != owner)
        bad(field + "." + key, "not a parameter of " + std::string(kind_name(spec.kind)));
    };
    expect_only("s", CompressorKind::RandomDithering);
    expect_only("q", CompressorKind::Bernoulli);
    expect_only("k", CompressorKind::TopK);
    if (auto v = find(j, "s")) spec.levels = static_cast<int>(get_integer(*v, field + ".s"));
    if (auto v = find(j, "q")) spec.keep_prob = get_number(*v, field + ".q");
    if (auto v = find(j, "k")) spec.k = static_cast<int>(get_integer(*v, field + ".k"));
  } else {
    bad(field, "expected a compressor name or object");
  }
  if (spec.kind == CompressorKind::RandomDithering && !(j.is_object() && j.contains("s"))) spec.levels = 8;
  if (spec.kind == CompressorKind::Bernoulli && !(j.is_object() && j.contains("q"))) spec.keep_prob = 0.5;
  if (spec.kind == CompressorKind::TopK && !(j.is_object() && j.contains("k"))) spec.k = 10;
  return spec;
}

RunConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key == "sweep") continue;
    if (std::find(std::begin(kRunKeys), std::end(kRunKeys), key) == std::end(kRunKeys)) bad(key, "unknown key");
  }
  RunConfig c;
  if (auto v = find(j, "algorithm")) {
    const auto a = get_string(*v, "algorithm");
    if (a == "l2gd") c.algorithm = Algorithm::L2gd;
    else if (a == "fedavg") c.algorithm = Algorithm::FedAvg;
    else bad("algorithm", "expected l2gd|fedavg, got '" + a + "'");
  }
  if (auto v = find(j, "dataset")) c.dataset = parse_dataset(*v);
  if (auto v = find(j, "n")) c.n = get_integer(*v, "n");
  if (auto v = find(j, "loss")) {
    const auto l = get_string(*v, "loss");
    if (l == "logistic") c.loss = LossKind::Logistic;
    else if (l == "sigmoid_squared") c.loss = LossKind::SigmoidSquared;
    else bad("loss", "expected logistic|sigmoid_squared, got '" + l + "'");
  }
  if (auto v = find(j, "l2")) c.l2 = get_number(*v, "l2");
  if (auto v = find(j, "p"); v && !v->is_null()) c.p = get_number(*v, "p");
  if (auto v = find(j, "lambda"); v && !v->is_null()) c.lambda = get_number(*v, "lambda");
  if (auto v = find(j, "eta")) {
    if (v->is_string()) {
      if (v->get<std::string>() != "auto") bad("eta", "expected a number or \"auto\"");
    } else {
      c.eta = get_number(*v, "eta");
    }
  }
  if (auto v = find(j, "K")) c.K = get_integer(*v, "K");
  if (auto v = find(j, "T"); v && !v->is_null()) c.T = get_integer(*v, "T");
  if (auto v = find(j, "compressors")) {
    if (!v->is_object()) bad("compressors", "expected an object");
    reject_unknown(*v, "compressors", {"client", "master"});
    if (auto cc = find(*v, "client")) c.client = compressor_from_json(*cc, "compressors.client");
    if (auto cm = find(*v, "master")) c.master = compressor_from_json(*cm, "compressors.master");
  }
  if (auto v = find(j, "seed")) c.seed = get_unsigned(*v, "seed");
  if (auto v = find(j, "seeds")) c.seeds = get_integer(*v, "seeds");
  if (auto v = find(j, "theory")) {
    if (!v->is_object()) bad("theory", "expected an object");
    reject_unknown(*v, "theory", {"samples", "epsilon"});
    if (auto s = find(*v, "samples")) c.theory_samples = get_integer(*s, "theory.samples");
    if (auto e = find(*v, "epsilon")) c.epsilon = get_number(*e, "theory.epsilon");
  }
  if (auto v = find(j, "out")) c.out = get_string(*v, "out");
  return c;
}

RunConfig normalize(RunConfig c) {
  if (c.algorithm == Algorithm::L2gd) {
    if (c.T) bad("T", "local-step count applies only to algorithm fedavg");
    if (!c.p) c.p = 0.5;
    if (!c.lambda) c.lambda = 10.0;
    if (!(*c.p > 0.0 && *c.p < 1.0)) bad("p", "must lie strictly inside (0, 1)");
    if (!(*c.lambda >= 0.0)) bad("lambda", "must be >= 0");
  } else {
    if (c.p) bad("p", "applies only to algorithm l2gd");
    if (c.lambda) bad("lambda", "applies only to algorithm l2gd");
    if (!c.T) c.T = 5;
    if (*c.T < 1) bad("T", "must be >= 1");
  }
  if (c.n < 1) bad("n", "must be >= 1");
  if (c.K < 1) bad("K", "must be >= 1");
  if (c.seeds < 1) bad("seeds", "must be >= 1");
  if (!(c.l2 >= 0.0)) bad("l2", "must be >= 0");
  if (c.eta && !(*c.eta > 0.0)) bad("eta", "must be > 0");
  if (c.theory_samples < 10'000) bad("theory.samples", "must be >= 10000");
  if (!(c.epsilon > 0.0)) bad("theory.epsilon", "must be > 0");
  if (c.out.empty()) bad("out", "must not be empty");

  auto& d = c.dataset;
  if (d.source == "libsvm") {
    if (d.path.empty()) bad("dataset.path", "required for source libsvm");
  } else if (d.source == "surrogate") {
    if (d.name != "a1a" && d.name != "a2a") bad("dataset.name", "expected a1a|a2a");
  } else if (d.source != "synth") {
    bad("dataset.source", "expected libsvm|surrogate|synth, got '" + d.source + "'");
  }
  if (d.d < 1) bad("dataset.d", "must be >= 1");
  if (d.per_client < 1) bad("dataset.per_client", "must be >= 1");
  if (!(d.heterogeneity >= 0.0)) bad("dataset.heterogeneity", "must be >= 0");

  for (const auto& [spec, field] : {std::pair{c.client, "compressors.client"}, std::pair{c.master, "compressors.master"}}) {
    try {
      validate(spec, d.d);
    } catch (const ConfigError& e) {
      bad(field, e.what());
    }
  }
  return c;
}

json serialize(const RunConfig& c) {
  json j;
  j["algorithm"] = algorithm_name(c.algorithm);
  j["dataset"] = dataset_to_json(c.dataset);
  j["n"] = c.n;
  j["loss"] = loss_name(c.loss);
  j["l2"] = c.l2;
  if (c.p) j["p"] = *c.p;
  if (c.lambda) j["lambda"] = *c.lambda;
  j["eta"] = c.eta ? json(*c.eta) : json("auto");
  j["K"] = c.K;
  if (c.T) j["T"] = *c.T;
  j["compressors"] = {{"client", compressor_to_json(c.client)}, {"master", compressor_to_json(c.master)}};
  j["seed"] = c.seed;
  j["seeds"] = c.seeds;
  j["theory"] = {{"samples", c.theory_samples}, {"epsilon", c.epsilon}};
  j["out"] = c.out;
  return j;
}

SweepSpec parse_sweep(const json& j) {
  SweepSpec s;
  s.base = normalize(parse_config(j));
  if (s.base.algorithm != Algorithm::L2gd) bad("algorithm", "sweeps vary p and lambda, which need l2gd");
  const json* sw = find(j, "sweep");
  if (sw) {
    if (!sw->is_object()) bad("sweep", "expected an object");
    reject_unknown(*sw, "sweep", {"p", "lambda"});
    if (auto v = find(*sw, "p")) s.p_grid = get_grid(*v, "sweep.p");
    if (auto v = find(*sw, "lambda")) s.lambda_grid = get_grid(*v, "sweep.lambda");
  }
  if (s.p_grid.empty()) s.p_grid = {*s.base.p};
  if (s.lambda_grid.empty()) s.lambda_grid = {*s.base.lambda};
  for (std::size_t i = 0; i < s.p_grid.size(); ++i)
    if (!(s.p_grid[i] > 0.0 && s.p_grid[i] < 1.0)) bad("sweep.p[" + std::to_string(i) + "]", "must lie in (0, 1)");
  for (std::size_t i = 0; i < s.lambda_grid.size(); ++i)
    if (!(s.lambda_grid[i] >= 0.0)) bad("sweep.lambda[" + std::to_string(i) + "]", "must be >= 0");
  return s;
}

json serialize(const SweepSpec& spec) {
  json j = serialize(spec.base);
  j["sweep"] = {{"p", spec.p_grid}, {"lambda", spec.lambda_grid}};
  return j;
}

void apply_overrides(json& j, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + a + "'");
    const std::string key = a.substr(0, eq), raw = a.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    json* node = &j;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      const std::string part = key.substr(start, dot - start);
      if (part.empty()) throw ConfigError("--set key '" + key + "' has an empty component");
      // Short compressor form "natural" widens to {"kind": "natural"} when a parameter is set.
      if (node->is_string() && key.rfind("compressors.", 0) == 0) *node = json{{"kind", node->get<std::string>()}};
      if (!node->is_object()) throw ConfigError("--set key '" + key + "' descends into a non-object");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      if (node->is_null()) *node = json::object();
      start = dot + 1;
    }
  }
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
  return j;
}

}  // namespace cl2gd
