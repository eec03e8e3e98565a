#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("cascade_cli_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string p(const std::string& name) const { return (dir / name).string(); }

  // stdout goes to `capture` when given, otherwise to cli.log with stderr.
  int run(const std::string& args, const std::string& capture = "") const {
    const std::string sink = capture.empty() ? " >> cli.log 2>&1" : " > " + capture + " 2>> cli.log";
    const std::string cmd = std::string("cd '") + dir.string() + "' && '" CASCADE_TUNER_PATH "' " + args + sink;
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }
  std::string read(const std::string& name) const {
    std::ifstream in(dir / name, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
  }
  json read_json(const std::string& name) const { return json::parse(read(name)); }
  void write(const std::string& name, const std::string& text) const { std::ofstream(dir / name) << text; }
};

const char* kConfig = R"({
  "benchmark": "synthetic",
  "models": [{"name": "small", "expected_cost": 1.0}, {"name": "large", "expected_cost": 10.0}],
  "architecture": "early",
  "seed": 7,
  "train_n": 300,
  "grid": {"rows": 3, "cols": 3},
  "synthetic": {
    "n": 1300,
    "rhos": [0.8],
    "marginals": [
      {"weights": [0.5, 0.5], "alphas": [6, 3], "betas": [2, 5]},
      {"weights": [0.6, 0.4], "alphas": [7, 2], "betas": [1.5, 3]}
    ]
  }
})";

}  // namespace

TEST_CASE("end-to-end workflow is byte-deterministic") {
  Workspace w;
  w.write("cfg.json", kConfig);
  for (const char* run : {"a", "b"}) {
    const std::string r = run;
    REQUIRE(w.run("synth --config cfg.json --out data_" + r + ".csv") == 0);
    REQUIRE(w.run("fit --config cfg.json --data data_" + r + ".csv --out model_" + r + ".json") == 0);
    REQUIRE(w.run("sweep --config cfg.json --model model_" + r + ".json --data data_" + r + ".csv --out sweep_" + r) ==
            0);
    REQUIRE(w.run("pr --config cfg.json --data data_" + r + ".csv --out pr_" + r) == 0);
  }
  CHECK(w.read("data_a.csv") == w.read("data_b.csv"));
  CHECK(w.read("model_a.json") == w.read("model_b.json"));
  for (const char* f : {"sweep_early.json", "sweep_final.json", "comparison.json"})
    CHECK(w.read(std::string("sweep_a/") + f) == w.read(std::string("sweep_b/") + f));
  for (const char* f : {"pr_20.json", "pr_30.json"})
    CHECK(w.read(std::string("pr_a/") + f) == w.read(std::string("pr_b/") + f));

  const auto model = w.read_json("model_a.json");
  CHECK(model["model"]["k"] == 2);
  CHECK(model["model"]["marginals"].size() == 2);
  CHECK(model["model"]["copulas"].size() == 1);
  CHECK(model["diagnostics"].size() == 2);
  CHECK(model["diagnostics"][0].contains("bic"));
  CHECK(model.contains("seed"));

  const auto sweep = w.read_json("sweep_a/sweep_early.json");
  CHECK(sweep["cells"].size() == 3);
  CHECK(sweep["cells"][0].size() == 3);
  for (const char* key : {"lc", "la", "phi", "xi", "loss", "error", "cost", "abstention", "converged"})
    CHECK(sweep["cells"][1][2].contains(key));
  CHECK(sweep["smoothing"].contains("flagged_fraction"));
  CHECK(sweep["grid"]["lambdas_cost"].size() == 3);

  const auto cmp = w.read_json("sweep_a/comparison.json");
  CHECK(cmp["nesting"]["violations"] == 0);
  CHECK(cmp["overall"].contains("pct_delta"));
  CHECK(cmp.contains("test"));
  CHECK(cmp["overall"]["early_loss"].get<double>() <= cmp["overall"]["final_loss"].get<double>() + 1e-6);

  const auto pr = w.read_json("pr_a/pr_30.json");
  CHECK(pr["rate"] == 0.3);
  CHECK(pr["points"].size() > 1);
  CHECK(pr["points"].back()["recall"] == 1.0);
  CHECK(pr["cost_savings"].size() > 0);
}

TEST_CASE("seed changes outputs and flags override config") {
  Workspace w;
  w.write("cfg.json", kConfig);
  REQUIRE(w.run("synth --config cfg.json --out a.csv") == 0);
  REQUIRE(w.run("synth --config cfg.json --seed 8 --out b.csv") == 0);
  CHECK(w.read("a.csv") != w.read("b.csv"));

  REQUIRE(w.run("fit --config cfg.json --data a.csv --components 2 --out m.json") == 0);
  const auto m = w.read_json("m.json");
  CHECK(m["components_override"] == 2);
  CHECK(m["model"]["marginals"][0]["weights"].size() == 2);
  CHECK(m["model"]["marginals"][1]["weights"].size() == 2);

  REQUIRE(w.run("sweep --config cfg.json --model m.json --grid 1x1 --architecture early --out one") == 0);
  const auto one = w.read_json("one/sweep_early.json");
  REQUIRE(one["cells"].size() == 1);
  CHECK(one["cells"][0].size() == 1);
  CHECK(one["overall_loss"] == one["cells"][0][0]["loss"]);
  CHECK_FALSE(fs::exists(w.dir / "one" / "sweep_final.json"));
}

TEST_CASE("fitted correlation tracks the generator") {
  Workspace w;
  std::string cfg = kConfig;
  cfg.replace(cfg.find("\"n\": 1300"), 9, "\"n\": 100000");
  w.write("cfg.json", cfg);
  REQUIRE(w.run("synth --config cfg.json --out big.csv") == 0);
  REQUIRE(w.run("fit --config cfg.json --data big.csv --train-n 99000 --components 2 --out m.json") == 0);
  const double rho = w.read_json("m.json")["model"]["copulas"][0]["rho"].get<double>();
  CHECK(std::abs(rho - 0.8) <= 0.05);
}

TEST_CASE("route traces one query") {
  Workspace w;
  w.write("cfg.json", kConfig);
  REQUIRE(w.run("route --config cfg.json --phi 0.7 --xi 0.2,0.3 --conf 0.5,0.25", "trace.txt") == 0);
  const auto text = w.read("trace.txt");
  CHECK(text.find("abstained at model 2") != std::string::npos);
  CHECK(text.find("cost 11") != std::string::npos);
  CHECK(w.run("route --config cfg.json --phi 0.3 --xi 0.5,0.1 --conf 0.5,0.25") == 2);
}

TEST_CASE("error classes map to distinct exit codes") {
  Workspace w;
  w.write("cfg.json", kConfig);
  w.write("bad.csv", "query_id,conf_1,correct_1,conf_2,correct_2\na,0.5,1,1.2,1\n");
  w.write("broken.json", "{ not json");
  CHECK(w.run("fit --config cfg.json --data missing.csv --out m.json") == 6);
  CHECK(w.run("fit --config cfg.json --data bad.csv --out m.json") == 3);
  CHECK(w.run("fit --config broken.json --data bad.csv --out m.json") == 3);
  CHECK(w.run("fit --config cfg.json") == 64);
  CHECK(w.run("frobnicate") == 64);
  CHECK(w.read("cli.log").find("row 1") != std::string::npos);
}
