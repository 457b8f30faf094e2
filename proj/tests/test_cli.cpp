#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cl2gd/data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kScratch = fs::temp_directory_path() / "cl2gd_cli_tests";

struct Outcome {
  int code = -1;
  std::string err;
};

Outcome cli(const std::string& args) {
  fs::create_directories(kScratch);
  const auto err_file = kScratch / "stderr.txt";
  const std::string cmd = std::string(CL2GD_CLI_PATH) + " " + args + " > /dev/null 2> " + err_file.string();
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(err_file);
  std::stringstream ss;
  ss << in.rdbuf();
  o.err = ss.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<json> read_lines(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

std::string out_dir(const std::string& name) {
  const auto d = kScratch / name;
  fs::remove_all(d);
  return d.string();
}

}  // namespace

TEST_CASE("run writes trace, theory and summary") {
  const auto dir = out_dir("run");
  const auto o = cli("run --set K=100 --set lambda=10 --set p=0.65 --out " + dir);
  REQUIRE(o.code == 0);
  for (const char* f : {"config.json", "trace.jsonl", "trace.csv", "theory.json", "summary.json"})
    CHECK(fs::exists(fs::path(dir) / f));

  const auto summary = read_json(fs::path(dir) / "summary.json");
  CHECK(summary["schema"] == "cl2gd.summary/1");
  const auto& run = summary["runs"][0];
  const double final_F = run["final_F"], initial_F = run["initial_F"];
  CHECK(std::isfinite(final_F));
  CHECK(final_F <= initial_F);
  CHECK(run["bits_per_n"].get<double>() ==
        doctest::Approx((run["uplink_bits"].get<double>() + run["downlink_bits"].get<double>()) / 5));
  CHECK(run["total_bits"].get<double>() ==
        run["uplink_bits"].get<double>() + 5 * run["downlink_bits"].get<double>());
  CHECK(run.contains("accuracy_personalized"));
  CHECK(run.contains("accuracy_averaged_pooled"));

  const auto trace = read_lines(fs::path(dir) / "trace.jsonl");
  REQUIRE(trace.size() == 101);
  for (std::size_t k = 0; k < trace.size(); ++k) {
    CHECK(trace[k]["schema"] == "cl2gd.trace/1");
    CHECK(trace[k]["k"] == k);
  }
  CHECK(trace.back()["F"].get<double>() == final_F);
  CHECK(trace.back()["rounds"] == run["rounds"]);

  const auto cfg = read_json(fs::path(dir) / "config.json");
  CHECK(cfg["K"] == 100);
  CHECK(cfg["p"] == 0.65);
}

TEST_CASE("identical configs give byte-identical traces") {
  const std::string args = "run --set K=60 --set compressors.client=bernoulli --set compressors.master=natural --seeds 3";
  const auto a = out_dir("replay_a"), b = out_dir("replay_b");
  REQUIRE(cli(args + " --out " + a).code == 0);
  REQUIRE(cli(args + " --jobs 3 --out " + b).code == 0);
  CHECK(slurp(fs::path(a) / "trace.jsonl") == slurp(fs::path(b) / "trace.jsonl"));
  CHECK(slurp(fs::path(a) / "trace.csv") == slurp(fs::path(b) / "trace.csv"));
  CHECK(slurp(fs::path(a) / "summary.json") == slurp(fs::path(b) / "summary.json"));
  CHECK(read_json(fs::path(a) / "summary.json")["runs"].size() == 3);
  CHECK(read_lines(fs::path(a) / "trace.jsonl").size() == 3 * 61);
}

TEST_CASE("exit codes and diagnostics") {
  const auto dir = out_dir("errors");
  auto o = cli("run --set K=0 --out " + dir);
  CHECK(o.code == 1);
  CHECK(o.err.find("'K'") != std::string::npos);

  o = cli("run --set T=3 --out " + dir);
  CHECK(o.code == 1);
  CHECK(o.err.find("'T'") != std::string::npos);

  o = cli("run --set colour=3 --out " + dir);
  CHECK(o.code == 1);
  CHECK(o.err.find("colour") != std::string::npos);

  o = cli("run --set dataset.source=libsvm --set dataset.path=" + (kScratch / "missing.txt").string() + " --out " + dir);
  CHECK(o.code == 2);

  const auto bad_data = kScratch / "bad.txt";
  std::ofstream(bad_data) << "+1 1:1\n+1 3:1 2:1\n";
  o = cli("run --set dataset.source=libsvm --set dataset.path=" + bad_data.string() + " --out " + dir);
  CHECK(o.code == 2);
  CHECK(o.err.find("line 2") != std::string::npos);

  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("run --jobs 0").code == 1);
  CHECK(cli("--help").code == 0);
  CHECK(cli("run --config " + (kScratch / "nope.json").string()).code == 1);
}

TEST_CASE("config file with overrides") {
  const auto cfg = kScratch / "cfg.json";
  fs::create_directories(kScratch);
  std::ofstream(cfg) << R"({"K": 15, "p": 0.3, "lambda": 2, "compressors": {"client": "natural"}})";
  const auto dir = out_dir("cfg");
  REQUIRE(cli("run --config " + cfg.string() + " --set p=0.4 --out " + dir).code == 0);
  const auto used = read_json(fs::path(dir) / "config.json");
  CHECK(used["K"] == 15);
  CHECK(used["p"] == 0.4);
  CHECK(used["lambda"] == 2.0);
  CHECK(used["compressors"]["client"]["kind"] == "natural");
  CHECK(used["out"] == dir);
}

TEST_CASE("single-point sweep equals run") {
  const std::string common = "--set K=40 --set lambda=5 --set compressors.client=terngrad --seeds 2";
  const auto run_dir = out_dir("sp_run"), sweep_dir = out_dir("sp_sweep");
  REQUIRE(cli("run " + common + " --set p=0.3 --out " + run_dir).code == 0);
  REQUIRE(cli("sweep " + common + " --set sweep.p=[0.3] --out " + sweep_dir).code == 0);
  const auto summary = read_json(fs::path(run_dir) / "summary.json");
  const auto records = read_lines(fs::path(sweep_dir) / "sweep.jsonl");
  REQUIRE(records.size() == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    CHECK(records[s]["final_F"] == summary["runs"][s]["final_F"]);
    CHECK(records[s]["total_bits"] == summary["runs"][s]["total_bits"]);
    CHECK(records[s]["seed"] == summary["runs"][s]["seed"]);
  }
}

TEST_CASE("sweep ordering and failure identification") {
  const auto dir = out_dir("sweep");
  REQUIRE(cli("sweep --set K=10 --set sweep.p=[0.2,0.6] --set sweep.lambda=[0,4] --seeds 2 --jobs 2 --out " + dir).code ==
          0);
  const auto records = read_lines(fs::path(dir) / "sweep.jsonl");
  REQUIRE(records.size() == 8);
  std::size_t idx = 0;
  for (int pi = 0; pi < 2; ++pi)
    for (int li = 0; li < 2; ++li)
      for (int s = 0; s < 2; ++s, ++idx) {
        CHECK(records[idx]["schema"] == "cl2gd.sweep/1");
        CHECK(records[idx]["p_index"] == pi);
        CHECK(records[idx]["lambda_index"] == li);
        CHECK(records[idx]["seed"] == s);
      }
  CHECK(fs::exists(fs::path(dir) / "sweep.csv"));

  // eta*lambda/(np) = 4e4 at the second grid point: the aggregation step diverges there only.
  const auto o = cli("sweep --set K=400 --set eta=0.1 --set sweep.lambda=[1,1e6] --out " + out_dir("sweep_fail"));
  CHECK(o.code == 3);
  CHECK(o.err.find("lambda[1]=1e+06") != std::string::npos);
  CHECK(cli("sweep --set algorithm=fedavg --out " + out_dir("sweep_fedavg")).code == 1);
}

TEST_CASE("theory report") {
  auto report = [](const std::string& args) {
    const auto dir = out_dir("theory");
    REQUIRE(cli("theory " + args + " --out " + dir).code == 0);
    return read_json(fs::path(dir) / "theory.json");
  };
  const auto plain = report("");
  CHECK(plain["schema"] == "cl2gd.theory/1");
  CHECK(plain["alpha"] == 0.0);
  CHECK(plain["beta"]["value"] == 0.0);
  CHECK(plain["uncompressed"] == true);
  const double L_f = plain["smoothness"]["L_f"], lambda = plain["lambda"], p = plain["p"];
  CHECK(plain["gamma"].get<double>() == doctest::Approx(std::max(L_f / (1 - p), lambda / (5 * p))));
  CHECK(plain["optimal_p_rate"]["grid_check"]["verdict"] == "agree");
  CHECK(plain["optimal_p_communication"]["grid_check"]["verdict"] == "agree");
  CHECK(plain["strongly_convex_bound"]["precondition_ok"] == true);
  CHECK(plain["nonconvex_budget"]["K"].get<long>() > 0);

  const auto none = report("--set lambda=0");
  CHECK(none["optimal_p_rate"]["out_of_range"] == true);
  bool flagged = false;
  for (const auto& n : none["optimal_p_rate"]["notes"])
    flagged |= n.get<std::string>().find("no communication") != std::string::npos;
  CHECK(flagged);

  const auto heavy = report("--set lambda=1e5");
  CHECK(heavy["optimal_p_rate"]["p_star"].get<double>() > 0.99);

  const auto comp = report("--set compressors.client=bernoulli --set compressors.master=natural --set p=0.4");
  CHECK(comp["alpha"].get<double>() > 0);
  CHECK(comp["beta"]["value"].get<double>() > 0);
  CHECK(comp["gamma"].get<double>() <= comp["gamma_u"].get<double>());
  CHECK(comp["optimal_p_rate"]["p_A"].is_number());
}

TEST_CASE("fedavg run") {
  const auto dir = out_dir("fedavg");
  REQUIRE(cli("run --set algorithm=fedavg --set T=3 --set K=10 --out " + dir).code == 0);
  const auto summary = read_json(fs::path(dir) / "summary.json");
  CHECK(summary["algorithm"] == "fedavg");
  CHECK(summary["runs"][0]["rounds"] == 10);
  CHECK(summary["runs"][0]["final_F"].get<double>() < summary["runs"][0]["initial_F"].get<double>());
}

TEST_CASE("dataset export") {
  const auto file = kScratch / "a1a.txt";
  fs::remove(file);
  REQUIRE(cli("dataset --name a1a --out " + file.string()).code == 0);
  const auto ds = cl2gd::data::load_libsvm(file);
  CHECK(ds.size() == 1605);
  CHECK(cli("dataset --name a9a --out " + file.string()).code == 1);

  // The exported file feeds back in as a libsvm source.
  const auto dir = out_dir("roundtrip");
  REQUIRE(cli("run --set K=5 --set dataset.source=libsvm --set dataset.path=" + file.string() + " --out " + dir).code ==
          0);
  const auto via_file = read_json(fs::path(dir) / "summary.json");
  const auto dir2 = out_dir("roundtrip_builtin");
  REQUIRE(cli("run --set K=5 --out " + dir2).code == 0);
  CHECK(via_file["runs"][0]["final_F"] == read_json(fs::path(dir2) / "summary.json")["runs"][0]["final_F"]);
}
