#pragma once

// Score datasets: wide CSV files plus a JSON sidecar describing the cascade,
// synthetic generation from a known joint model, and seeded splits.
//
// CSV layout: query_id, then per model i = 1..k the columns conf_i (praw_i in
// raw mode), correct_i (0/1) and optionally cost_i.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cascade/calibration.hpp"
#include "cascade/core.hpp"
#include "cascade/joint_density.hpp"

namespace cascade {

enum class SchemaMode { Raw, Calibrated };
enum class SplitKind { Train, Test, Unsplit };

const char* to_string(SchemaMode m);
SchemaMode schema_mode_from_string(const std::string& s);

struct ScoreDataset {
  std::string benchmark;
  CascadeSpec cascade;
  SchemaMode mode = SchemaMode::Calibrated;
  std::vector<QueryRecord> records;  // confidences hold p_raw in raw mode
  SplitKind split = SplitKind::Unsplit;

  std::size_t size() const { return records.size(); }
  // columns[i][q] = confidence of model i on query q.
  std::vector<std::vector<double>> columns() const;
};

// {models:[{name, expected_cost}], architecture} with architecture defaulting to "early".
CascadeSpec cascade_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CascadeSpec& spec);
nlohmann::json read_json_file(const std::string& path);

ScoreDataset parse_dataset_csv(std::istream& in, const CascadeSpec& spec, SchemaMode mode,
                               const std::string& source = "<stream>");
ScoreDataset load_dataset(const std::string& csv_path, const CascadeSpec& spec, SchemaMode mode);
ScoreDataset load_dataset(const std::string& csv_path, const std::string& config_path, SchemaMode mode);

// Cost columns are written only when some realized cost differs from the expected cost.
void write_dataset_csv(std::ostream& out, const ScoreDataset& ds);
void save_dataset(const ScoreDataset& ds, const std::string& path);

struct SyntheticConfig {
  std::vector<BetaMixture> marginals;
  std::vector<double> rhos;  // k - 1 latent correlations
  std::vector<ModelProfile> models;
  Architecture architecture = Architecture::EarlyAbstention;
  std::size_t n = 1000;
  // 0 draws correct_i ~ Bernoulli(Phi_i). Otherwise the success probability is
  // sigmoid((1 + miscalibration) * logit(Phi_i)), so positive values make the
  // scores underconfident and values in (-1, 0) overconfident.
  double miscalibration = 0.0;
  std::uint64_t seed = 0;
  std::string benchmark = "synthetic";
};

ScoreDataset generate_synthetic(const SyntheticConfig& cfg);

// Uniform shuffle by seed; the first train_n records form the training split.
std::pair<ScoreDataset, ScoreDataset> split_dataset(const ScoreDataset& ds, std::size_t train_n, std::uint64_t seed);

// One logistic calibration per model fitted on a raw dataset.
std::vector<CalibrationModel> fit_dataset_calibration(const ScoreDataset& raw, const LogisticOptions& opts = {});
ScoreDataset apply_dataset_calibration(const ScoreDataset& raw, const std::vector<CalibrationModel>& models);

}  // namespace cascade
