// cascade_tuner: fit joint confidence models, sweep cascade thresholds,
// evaluate abstention prediction and generate synthetic score data.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cascade/abstention.hpp"
#include "cascade/analytic.hpp"
#include "cascade/core.hpp"
#include "cascade/data_io.hpp"
#include "cascade/error.hpp"
#include "cascade/joint_density.hpp"
#include "cascade/optimizer.hpp"

using namespace cascade;
using nlohmann::json;

namespace {

constexpr int kUsageExit = 64;
constexpr int kInternalExit = 1;

// Every random stream is derived from the one --seed value in a fixed order.
struct Seeds {
  std::uint64_t master, split, em, optimizer, synth;
  explicit Seeds(std::uint64_t seed) : master(seed) {
    std::mt19937_64 g(seed);
    split = g();
    em = g();
    optimizer = g();
    synth = g();
  }
};

struct Common {
  std::string data, config, out, model, mode = "calibrated";
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::optional<std::size_t> train_n;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("cascade_tuner");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("CASCADE_TUNER_LOG")) spdlog::set_level(spdlog::level::from_str(env));
}

void write_json(const json& j, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write '" + path + "'");
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "failed writing '" + path + "'");
  spdlog::info("wrote {}", path);
}

std::string in_dir(const std::string& dir, const std::string& name) {
  std::filesystem::create_directories(dir);
  return (std::filesystem::path(dir) / name).string();
}

json config_or_empty(const std::string& path) { return path.empty() ? json::object() : read_json_file(path); }

std::uint64_t resolve_seed(const Common& c, const json& cfg) {
  if (c.seed_given) return c.seed;
  return cfg.value("seed", std::uint64_t{0});
}

// Train split used by fit, sweep and pr: config "train_n" or --train-n; all data when absent.
std::pair<ScoreDataset, std::optional<ScoreDataset>> train_test(const ScoreDataset& ds, std::optional<std::size_t> train_n,
                                                                const Seeds& seeds) {
  if (!train_n) return {ds, std::nullopt};
  auto [train, test] = split_dataset(ds, *train_n, seeds.split);
  return {std::move(train), std::move(test)};
}

std::optional<std::size_t> resolve_train_n(const Common& c, const json& cfg) {
  if (c.train_n) return c.train_n;
  if (cfg.contains("train_n")) return cfg["train_n"].get<std::size_t>();
  return std::nullopt;
}

json calibration_json(const std::vector<CalibrationModel>& cal) {
  json a = json::array();
  for (const auto& m : cal) a.push_back({{"intercept", m.intercept}, {"slope", m.slope}});
  return a;
}

std::vector<CalibrationModel> calibration_from_json(const json& j) {
  std::vector<CalibrationModel> out;
  for (const auto& m : j) {
    CalibrationModel c;
    c.intercept = m.at("intercept").get<double>();
    c.slope = m.at("slope").get<double>();
    out.push_back(c);
  }
  return out;
}

// --------------------------------------------------------------------------
// fit

int run_fit(const Common& c, std::optional<int> components) {
  const auto cfg = read_json_file(c.config);
  const auto spec = cascade_from_json(cfg);
  const auto mode = schema_mode_from_string(c.mode);
  const auto seed = resolve_seed(c, cfg);
  const Seeds seeds(seed);
  const auto ds = load_dataset(c.data, spec, mode);
  const auto train_n = resolve_train_n(c, cfg);
  auto [train, test] = train_test(ds, train_n, seeds);
  spdlog::info("fitting on {} of {} records", train.size(), ds.size());

  json out;
  if (mode == SchemaMode::Raw) {
    const auto cal = fit_dataset_calibration(train);
    out["calibration"] = calibration_json(cal);
    train = apply_dataset_calibration(train, cal);
  }
  JointFitOptions opts;
  if (!components && cfg.contains("components")) components = cfg["components"].get<int>();
  opts.components = components;
  opts.em.seed = seeds.em;
  const auto fit = fit_markov_model(train.columns(), opts);

  out["model"] = to_json(fit.model);
  out["cascade"] = to_json(spec);
  out["mode"] = to_string(mode);
  out["seed"] = seed;
  out["components_override"] = components ? json(*components) : json(nullptr);
  out["split"] = {{"train_n", train_n ? json(*train_n) : json(nullptr)}, {"n_total", ds.size()}};
  json diag = json::array();
  for (std::size_t i = 0; i < fit.marginal_fits.size(); ++i) {
    const auto& sel = fit.marginal_fits[i];
    json bic = json::object(), ll = json::object();
    for (auto [m, v] : sel.bic_by_components) bic[std::to_string(m)] = v;
    for (auto [m, v] : sel.log_likelihood_by_components) ll[std::to_string(m)] = v;
    diag.push_back({{"model", spec.model(i).name},
                    {"components", sel.best.mixture.components()},
                    {"log_likelihood", sel.best.log_likelihood},
                    {"em_iterations", sel.best.iterations},
                    {"converged", sel.best.converged},
                    {"bic", bic},
                    {"log_likelihood_by_components", ll}});
  }
  out["diagnostics"] = diag;
  write_json(out, c.out);
  return 0;
}

// --------------------------------------------------------------------------
// sweep

PreferenceGrid resolve_grid(const std::string& flag, const json& cfg, const CascadeSpec& spec) {
  if (!flag.empty()) {
    const auto x = flag.find('x');
    if (x == std::string::npos) fail(ErrorKind::InvalidArgument, "--grid expects ROWSxCOLS, e.g. 10x10");
    const auto rows = std::stoul(flag.substr(0, x));
    const auto cols = std::stoul(flag.substr(x + 1));
    return PreferenceGrid::default_for(spec, rows, cols);
  }
  if (cfg.contains("grid") && cfg["grid"].contains("rows")) {
    return PreferenceGrid::default_for(spec, cfg["grid"].at("rows").get<std::size_t>(),
                                       cfg["grid"].at("cols").get<std::size_t>());
  }
  if (cfg.contains("grid")) {
    PreferenceGrid g;
    g.lambdas_cost = cfg["grid"].at("lambdas_cost").get<std::vector<double>>();
    g.lambdas_abs = cfg["grid"].at("lambdas_abs").get<std::vector<double>>();
    validate_grid(g);
    return g;
  }
  return PreferenceGrid::default_for(spec);
}

OptimizerOptions resolve_optimizer(const json& cfg, const Seeds& seeds) {
  OptimizerOptions o;
  o.seed = seeds.optimizer;
  if (cfg.contains("optimizer")) {
    const auto& j = cfg["optimizer"];
    o.n_starts = j.value("n_starts", o.n_starts);
    o.max_iterations = j.value("max_iterations", o.max_iterations);
    o.gradient_tol = j.value("gradient_tol", o.gradient_tol);
    o.improvement_tol = j.value("improvement_tol", o.improvement_tol);
    if (j.value("conditioning", std::string("exact")) == "pairwise")
      o.analytic.conditioning = ChainConditioning::PairwiseInterval;
  }
  return o;
}

json optimizer_json(const OptimizerOptions& o) {
  return {{"n_starts", o.n_starts},
          {"max_iterations", o.max_iterations},
          {"gradient_tol", o.gradient_tol},
          {"improvement_tol", o.improvement_tol},
          {"seed", o.seed},
          {"conditioning", o.analytic.conditioning == ChainConditioning::ExactPath ? "exact" : "pairwise"}};
}

// Empirical test-split performance of every cell's thresholds.
json test_evaluation(const SweepResult& r, const CascadeSpec& spec, const ScoreDataset& test) {
  const auto s = spec.with_architecture(r.architecture);
  json rows = json::array();
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& row : r.cells) {
    json jr = json::array();
    for (const auto& cell : row) {
      const auto perf = evaluate_empirical(s, cell.thresholds, test.records);
      const double loss = empirical_loss(perf, cell.lambda_cost, cell.lambda_abstention);
      total += loss;
      ++n;
      jr.push_back({{"loss", loss}, {"error", perf.error}, {"cost", perf.cost}, {"abstention", perf.abstention}});
    }
    rows.push_back(std::move(jr));
  }
  return {{"n_test", test.size()}, {"overall_loss", total / static_cast<double>(n)}, {"cells", rows}};
}

int run_sweep(const Common& c, const std::string& grid_flag, double smooth_r, const std::string& arch) {
  const auto cfg = config_or_empty(c.config);
  const auto fitted = read_json_file(c.model);
  const auto model = markov_model_from_json(fitted.contains("model") ? fitted["model"] : fitted);
  if (!cfg.contains("models") && !fitted.contains("cascade"))
    fail(ErrorKind::InvalidArgument, "sweep needs the cascade models from --config or the fitted model file");
  const auto spec = cascade_from_json(cfg.contains("models") ? cfg : fitted["cascade"]);
  const auto seed = c.seed_given ? c.seed : cfg.value("seed", fitted.value("seed", std::uint64_t{0}));
  const Seeds seeds(seed);
  const auto grid = resolve_grid(grid_flag, cfg, spec);
  const auto opts = resolve_optimizer(cfg, seeds);
  if (c.out.empty()) fail(ErrorKind::InvalidArgument, "sweep needs --out DIR");

  std::optional<ScoreDataset> test;
  if (!c.data.empty()) {
    const auto mode = schema_mode_from_string(fitted.value("mode", c.mode));
    auto ds = load_dataset(c.data, spec, mode);
    std::optional<std::size_t> train_n = c.train_n;
    if (!train_n && fitted.contains("split") && !fitted["split"]["train_n"].is_null())
      train_n = fitted["split"]["train_n"].get<std::size_t>();
    if (!train_n) train_n = resolve_train_n(c, cfg);
    if (!train_n) fail(ErrorKind::InvalidArgument, "test evaluation needs a train size (--train-n or config train_n)");
    auto split = train_test(ds, train_n, seeds);
    test = std::move(split.second);
    if (mode == SchemaMode::Raw) test = apply_dataset_calibration(*test, calibration_from_json(fitted.at("calibration")));
  }

  spdlog::info("sweeping {}x{} grid, architecture {}", grid.rows(), grid.cols(), arch);
  const auto sweep_one = [&](Architecture a) {
    const auto s = spec.with_architecture(a);
    auto raw = sweep_preference_grid(model, s, grid, opts);
    if (grid.rows() >= 2 && grid.cols() >= 2) return smooth_threshold_grid(raw, smooth_r, model, s, opts.analytic);
    return raw;
  };
  auto annotate = [&](json j, const SweepResult& r) {
    j["seed"] = seed;
    j["optimizer"] = optimizer_json(opts);
    if (test) j["test"] = test_evaluation(r, spec, *test);
    return j;
  };

  if (arch == "both") {
    const auto cmp = compare_architectures(model, spec, grid, opts, smooth_r);
    if (cmp.nesting_violations > 0)
      spdlog::warn("{} cells violate early <= final on unsmoothed losses", cmp.nesting_violations);
    write_json(annotate(to_json(cmp.early), cmp.early), in_dir(c.out, "sweep_early.json"));
    write_json(annotate(to_json(cmp.final), cmp.final), in_dir(c.out, "sweep_final.json"));
    json j = to_json(cmp);
    j.erase("early");
    j.erase("final");
    j["seed"] = seed;
    j["optimizer"] = optimizer_json(opts);
    j["smoothing_r"] = smooth_r;
    j["cascade"] = to_json(spec);
    if (test) {
      const auto te = test_evaluation(cmp.early, spec, *test);
      const auto tf = test_evaluation(cmp.final, spec, *test);
      json cells = json::array();
      for (std::size_t i = 0; i < grid.rows(); ++i) {
        json jr = json::array();
        for (std::size_t k = 0; k < grid.cols(); ++k) {
          const double e = te["cells"][i][k]["loss"], f = tf["cells"][i][k]["loss"];
          jr.push_back({{"early_loss", e}, {"final_loss", f}, {"pct_delta_loss", percent_change(e, f)}});
        }
        cells.push_back(std::move(jr));
      }
      const double e = te["overall_loss"], f = tf["overall_loss"];
      j["test"] = {{"n_test", test->size()},
                   {"early_loss", e},
                   {"final_loss", f},
                   {"pct_delta", percent_change(e, f)},
                   {"cells", cells}};
    }
    write_json(j, in_dir(c.out, "comparison.json"));
  } else {
    const auto a = architecture_from_string(arch);
    const auto r = sweep_one(a);
    write_json(annotate(to_json(r), r), in_dir(c.out, std::string("sweep_") + to_string(a) + ".json"));
  }
  return 0;
}

// --------------------------------------------------------------------------
// pr

int run_pr(const Common& c, std::vector<double> rates) {
  const auto cfg = read_json_file(c.config);
  const auto spec = cascade_from_json(cfg);
  if (spec.size() < 2) fail(ErrorKind::InvalidArgument, "abstention prediction needs at least two models");
  const auto mode = schema_mode_from_string(c.mode);
  const auto seed = resolve_seed(c, cfg);
  const Seeds seeds(seed);
  const auto ds = load_dataset(c.data, spec, mode);
  const auto train_n = resolve_train_n(c, cfg);
  if (!train_n) fail(ErrorKind::InvalidArgument, "pr needs a train size (--train-n or config train_n)");
  auto [train, test] = train_test(ds, train_n, seeds);
  if (rates.empty()) rates = {0.2, 0.3};
  if (c.out.empty()) fail(ErrorKind::InvalidArgument, "pr needs --out DIR");
  double ratio = kDefaultCostRatio;
  if (cfg.contains("cost_ratio")) {
    ratio = cfg["cost_ratio"].get<double>();
  } else if (spec.model(spec.size() - 1).expected_cost > 0.0) {
    double upstream = 0.0;
    for (std::size_t i = 0; i + 1 < spec.size(); ++i) upstream += spec.model(i).expected_cost;
    ratio = std::clamp(upstream / spec.total_expected_cost(), 1e-12, 1.0);
  }

  const auto k = spec.size();
  auto upstream = [&](const ScoreDataset& d) {
    std::vector<std::vector<double>> x;
    for (const auto& r : d.records) x.emplace_back(r.confidences.begin(), r.confidences.end() - 1);
    return x;
  };
  auto final_col = [&](const ScoreDataset& d) { return d.columns()[k - 1]; };

  for (double rate : rates) {
    const auto labeling = label_abstentions(final_col(train), rate);
    const auto clf = fit_abstention_classifier(upstream(train), labeling);
    std::vector<bool> test_labels;
    for (double v : final_col(*test)) test_labels.push_back(v < labeling.xi_k);
    const auto curve = precision_recall(clf, upstream(*test), test_labels);

    json j = to_json(curve);
    j["rate"] = rate;
    j["xi_k"] = labeling.xi_k;
    j["train_realized_rate"] = labeling.realized_rate();
    j["average_precision"] = average_precision(curve);
    j["coefficients"] = {{"intercept", clf.model.intercept}, {"slopes", clf.model.slopes}};
    json at = json::array();
    for (double r : {0.1, 0.2, 0.3, 0.5}) {
      const double p = precision_at_recall(curve, r);
      const auto sav = cost_savings_estimate(curve.baseline, r, p, ratio);
      at.push_back({{"recall", r},
                    {"precision", p},
                    {"early_fraction", sav.early_fraction},
                    {"total_cost_factor", sav.total_cost_factor},
                    {"new_abstention_rate", sav.new_abstention_rate}});
    }
    j["cost_savings"] = {{"cost_ratio", ratio}, {"at_recall", at}};
    j["seed"] = seed;
    j["n_train"] = train.size();
    j["n_test"] = test->size();
    const int pct = static_cast<int>(std::lround(rate * 100.0));
    write_json(j, in_dir(c.out, "pr_" + std::to_string(pct) + ".json"));
  }
  return 0;
}

// --------------------------------------------------------------------------
// synth

BetaMixture mixture_from_json(const json& j) {
  BetaMixture m{j.at("weights").get<std::vector<double>>(), j.at("alphas").get<std::vector<double>>(),
                j.at("betas").get<std::vector<double>>()};
  validate_mixture(m);
  return m;
}

int run_synth(const Common& c) {
  const auto cfg = read_json_file(c.config);
  const auto spec = cascade_from_json(cfg);
  const auto seed = resolve_seed(c, cfg);
  const Seeds seeds(seed);
  if (!cfg.contains("synthetic")) fail(ErrorKind::Schema, "synth config needs a 'synthetic' section");
  const auto& s = cfg["synthetic"];
  SyntheticConfig sc;
  try {
    for (const auto& m : s.at("marginals")) sc.marginals.push_back(mixture_from_json(m));
    sc.rhos = s.at("rhos").get<std::vector<double>>();
    sc.n = s.value("n", std::size_t{1000});
    sc.miscalibration = s.value("miscalibration", 0.0);
  } catch (const json::exception& e) {
    fail(ErrorKind::Schema, std::string("malformed synthetic section: ") + e.what());
  }
  sc.models = spec.models();
  sc.architecture = spec.architecture();
  sc.seed = seeds.synth;
  sc.benchmark = cfg.value("benchmark", std::string("synthetic"));
  const auto ds = generate_synthetic(sc);
  if (c.out.empty() || c.out == "-") {
    write_dataset_csv(std::cout, ds);
  } else {
    save_dataset(ds, c.out);
    spdlog::info("wrote {} records to {}", ds.size(), c.out);
  }
  return 0;
}

// --------------------------------------------------------------------------
// route

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorKind::InvalidArgument, "cannot parse number '" + item + "'");
    }
  }
  return out;
}

int run_route(const Common& c, const std::string& phi, const std::string& xi, const std::string& conf,
              const std::string& correct) {
  const auto spec = cascade_from_json(read_json_file(c.config));
  ThresholdVector t{phi.empty() ? std::vector<double>{} : parse_list(phi), parse_list(xi)};
  require_valid_thresholds(spec, t);
  std::vector<bool> ok(spec.size(), true);
  if (!correct.empty()) {
    const auto v = parse_list(correct);
    if (v.size() != spec.size()) fail(ErrorKind::InvalidArgument, "--correct needs one 0/1 per model");
    for (std::size_t i = 0; i < v.size(); ++i) ok[i] = v[i] != 0.0;
  }
  const auto rec = make_record(spec, "cli", parse_list(conf), ok);
  require_record_matches(spec, rec);

  const std::size_t k = spec.size();
  double cost = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    cost += rec.costs[i];
    const double p = rec.confidences[i];
    std::cout << "model " << i + 1 << " (" << spec.model(i).name << "): confidence " << p << ", abstain below "
              << t.abstention[i];
    if (i + 1 < k) std::cout << ", answer above " << t.deferral[i];
    std::cout << ", cumulative cost " << cost << "\n";
    if (p < t.abstention[i]) {
      std::cout << "  -> abstain\n";
      break;
    }
    if (i + 1 == k || p > t.deferral[i]) {
      std::cout << "  -> answer (" << (rec.correct[i] ? "correct" : "error") << ")\n";
      break;
    }
    std::cout << "  -> defer\n";
  }
  const auto out = route(spec, t, rec);
  std::cout << "outcome: " << (out.abstained() ? "abstained" : "answered") << " at model " << out.model + 1
            << ", cost " << out.cumulative_cost << (out.was_error ? ", error" : "") << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Tune and evaluate deferral and abstention thresholds of model cascades"};
  app.require_subcommand(1);
  Common common;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config: models, architecture, grid, optimizer, seed");
    sub->add_option("--out", common.out, "Output file or directory");
    sub->add_option("--seed", common.seed, "Master seed")->each([&](const std::string&) { common.seed_given = true; });
  };

  auto* fit = app.add_subcommand("fit", "Fit the joint confidence model");
  add_common(fit);
  fit->add_option("--data", common.data, "Score CSV")->required();
  fit->add_option("--mode", common.mode, "raw|calibrated")->check(CLI::IsMember({"raw", "calibrated"}));
  fit->add_option("--train-n", common.train_n, "Training split size");
  std::optional<int> components;
  fit->add_option("--components", components, "Fixed mixture components (1-3); BIC selection otherwise")
      ->check(CLI::Range(1, kMaxMixtureComponents));

  auto* sweep = app.add_subcommand("sweep", "Optimize thresholds over the preference grid");
  add_common(sweep);
  sweep->add_option("--model", common.model, "Fitted model JSON from 'fit'")->required();
  sweep->add_option("--data", common.data, "Score CSV for test-split evaluation");
  sweep->add_option("--mode", common.mode, "raw|calibrated")->check(CLI::IsMember({"raw", "calibrated"}));
  sweep->add_option("--train-n", common.train_n, "Training split size");
  std::string grid_flag, arch = "both";
  double smooth_r = kDefaultSmoothingR;
  sweep->add_option("--grid", grid_flag, "Default grid shape ROWSxCOLS");
  sweep->add_option("--smooth-r", smooth_r, "Outlier ratio for threshold smoothing")->check(CLI::PositiveNumber);
  sweep->add_option("--architecture", arch, "early|final|both")->check(CLI::IsMember({"early", "final", "both"}));

  auto* pr = app.add_subcommand("pr", "Abstention prediction precision-recall curves");
  add_common(pr);
  pr->add_option("--data", common.data, "Score CSV")->required();
  pr->add_option("--mode", common.mode, "raw|calibrated")->check(CLI::IsMember({"raw", "calibrated"}));
  pr->add_option("--train-n", common.train_n, "Training split size");
  std::vector<double> rates;
  pr->add_option("--rate", rates, "Final-model abstention rate(s); default 0.2 and 0.3");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic score dataset");
  add_common(synth);

  auto* rt = app.add_subcommand("route", "Trace one query through the cascade");
  add_common(rt);
  std::string phi, xi, conf, correct;
  rt->add_option("--phi", phi, "Deferral thresholds, comma separated");
  rt->add_option("--xi", xi, "Abstention thresholds, comma separated")->required();
  rt->add_option("--conf", conf, "Confidences, comma separated")->required();
  rt->add_option("--correct", correct, "Correctness 0/1, comma separated");

  for (auto* sub : {fit, pr, synth, rt}) sub->get_option("--config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageExit;
  }

  try {
    if (*fit) return run_fit(common, components);
    if (*sweep) return run_sweep(common, grid_flag, smooth_r, arch);
    if (*pr) return run_pr(common, rates);
    if (*synth) return run_synth(common);
    if (*rt) return run_route(common, phi, xi, conf, correct);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(e.kind());
  } catch (const json::exception& e) {
    spdlog::error("malformed JSON: {}", e.what());
    return static_cast<int>(ErrorKind::Schema);
  } catch (const std::filesystem::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ErrorKind::Io);
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kInternalExit;
  }
  return 0;
}
