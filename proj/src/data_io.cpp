#include "cascade/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "cascade/error.hpp"

namespace cascade {

namespace {

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no, const std::string& source) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) fail(ErrorKind::Schema, source + ": unterminated quote on line " + std::to_string(line_no));
  fields.push_back(std::move(cur));
  return fields;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t derive_seed(std::mt19937_64& master) { return master(); }

}  // namespace

const char* to_string(SchemaMode m) { return m == SchemaMode::Raw ? "raw" : "calibrated"; }

SchemaMode schema_mode_from_string(const std::string& s) {
  if (s == "raw") return SchemaMode::Raw;
  if (s == "calibrated") return SchemaMode::Calibrated;
  fail(ErrorKind::InvalidArgument, "unknown schema mode '" + s + "' (expected raw|calibrated)");
}

std::vector<std::vector<double>> ScoreDataset::columns() const {
  std::vector<std::vector<double>> cols(cascade.size());
  for (auto& c : cols) c.reserve(records.size());
  for (const auto& r : records)
    for (std::size_t i = 0; i < cols.size(); ++i) cols[i].push_back(r.confidences[i]);
  return cols;
}

CascadeSpec cascade_from_json(const nlohmann::json& j) {
  try {
    std::vector<ModelProfile> models;
    for (const auto& m : j.at("models")) models.push_back({m.at("name").get<std::string>(), m.at("expected_cost").get<double>(), 0});
    const auto arch = architecture_from_string(j.value("architecture", std::string("early")));
    return CascadeSpec(std::move(models), arch);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Schema, std::string("malformed cascade config: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::Schema, std::string("invalid cascade config: ") + e.what());
  }
}

nlohmann::json to_json(const CascadeSpec& spec) {
  nlohmann::json j;
  j["models"] = nlohmann::json::array();
  for (const auto& m : spec.models()) j["models"].push_back({{"name", m.name}, {"expected_cost", m.expected_cost}});
  j["architecture"] = to_string(spec.architecture());
  return j;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::Schema, path + ": " + e.what());
  }
}

ScoreDataset parse_dataset_csv(std::istream& in, const CascadeSpec& spec, SchemaMode mode, const std::string& source) {
  const std::size_t k = spec.size();
  const std::string conf_prefix = mode == SchemaMode::Raw ? "praw_" : "conf_";
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
      if (!trim(line).empty()) return true;
    }
    return false;
  };
  if (!next_line()) fail(ErrorKind::Schema, source + ": missing header row");

  std::map<std::string, std::size_t> col;
  const auto header = split_csv_line(line, line_no, source);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const auto name = trim(header[c]);
    if (!col.emplace(name, c).second) fail(ErrorKind::Schema, source + ": duplicate column '" + name + "'");
  }
  auto require = [&](const std::string& name) {
    const auto it = col.find(name);
    if (it == col.end()) fail(ErrorKind::Schema, source + ": missing column '" + name + "'");
    return it->second;
  };
  // Count per-model confidence columns to catch files written for another k.
  std::size_t present = 0;
  while (col.count(conf_prefix + std::to_string(present + 1))) ++present;
  if (present != k && present > 0)
    fail(ErrorKind::Schema, source + ": file has " + std::to_string(present) + " " + conf_prefix +
                                "* columns but the cascade has k=" + std::to_string(k));

  const std::size_t id_col = require("query_id");
  std::vector<std::size_t> conf_col(k), correct_col(k);
  std::vector<std::optional<std::size_t>> cost_col(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto suffix = std::to_string(i + 1);
    conf_col[i] = require(conf_prefix + suffix);
    correct_col[i] = require("correct_" + suffix);
    if (const auto it = col.find("cost_" + suffix); it != col.end()) cost_col[i] = it->second;
  }

  ScoreDataset ds{"", spec, mode, {}, SplitKind::Unsplit};
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t row = 0;
  while (next_line()) {
    ++row;
    const auto fields = split_csv_line(line, line_no, source);
    const auto where = [&](const std::string& column) {
      return source + ": row " + std::to_string(row) + " (line " + std::to_string(line_no) + "), column '" + column + "'";
    };
    if (fields.size() != header.size())
      fail(ErrorKind::Schema, source + ": row " + std::to_string(row) + " (line " + std::to_string(line_no) + ") has " +
                                  std::to_string(fields.size()) + " fields, header has " +
                                  std::to_string(header.size()));
    auto number = [&](std::size_t c) {
      const auto text = trim(fields[c]);
      double v = 0.0;
      const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
      if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v))
        fail(ErrorKind::Schema, where(trim(header[c])) + ": '" + text + "' is not a number");
      return v;
    };
    QueryRecord rec;
    rec.query_id = trim(fields[id_col]);
    if (rec.query_id.empty()) fail(ErrorKind::Schema, where("query_id") + ": empty query id");
    if (const auto [it, fresh] = seen.emplace(rec.query_id, row); !fresh)
      fail(ErrorKind::Schema, where("query_id") + ": duplicate id '" + rec.query_id + "' (first seen in row " +
                                  std::to_string(it->second) + ")");
    for (std::size_t i = 0; i < k; ++i) {
      const double conf = number(conf_col[i]);
      if (!(conf >= 0.0 && conf <= 1.0))
        fail(ErrorKind::Schema, where(trim(header[conf_col[i]])) + ": value " + trim(fields[conf_col[i]]) +
                                    " outside [0,1]");
      rec.confidences.push_back(conf);
      const auto c = trim(fields[correct_col[i]]);
      if (c != "0" && c != "1") fail(ErrorKind::Schema, where(trim(header[correct_col[i]])) + ": expected 0 or 1, got '" + c + "'");
      rec.correct.push_back(c == "1");
      double cost = spec.model(i).expected_cost;
      if (cost_col[i] && !trim(fields[*cost_col[i]]).empty()) {
        cost = number(*cost_col[i]);
        if (!(cost >= 0.0)) fail(ErrorKind::Schema, where(trim(header[*cost_col[i]])) + ": negative cost");
      }
      rec.costs.push_back(cost);
    }
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.empty()) fail(ErrorKind::Schema, source + ": no data rows");
  return ds;
}

ScoreDataset load_dataset(const std::string& csv_path, const CascadeSpec& spec, SchemaMode mode) {
  std::ifstream in(csv_path);
  if (!in) fail(ErrorKind::Io, "cannot open dataset '" + csv_path + "'");
  auto ds = parse_dataset_csv(in, spec, mode, csv_path);
  const auto slash = csv_path.find_last_of('/');
  auto base = slash == std::string::npos ? csv_path : csv_path.substr(slash + 1);
  if (const auto dot = base.rfind('.'); dot != std::string::npos) base.erase(dot);
  ds.benchmark = base;
  return ds;
}

ScoreDataset load_dataset(const std::string& csv_path, const std::string& config_path, SchemaMode mode) {
  const auto cfg = read_json_file(config_path);
  auto ds = load_dataset(csv_path, cascade_from_json(cfg), mode);
  if (cfg.contains("benchmark")) ds.benchmark = cfg["benchmark"].get<std::string>();
  return ds;
}

void write_dataset_csv(std::ostream& out, const ScoreDataset& ds) {
  const std::size_t k = ds.cascade.size();
  const std::string conf_prefix = ds.mode == SchemaMode::Raw ? "praw_" : "conf_";
  bool with_costs = false;
  for (const auto& r : ds.records)
    for (std::size_t i = 0; i < k; ++i) with_costs |= r.costs[i] != ds.cascade.model(i).expected_cost;

  out << "query_id";
  for (std::size_t i = 1; i <= k; ++i) {
    out << ',' << conf_prefix << i << ",correct_" << i;
    if (with_costs) out << ",cost_" << i;
  }
  out << '\n';
  for (const auto& r : ds.records) {
    require_record_matches(ds.cascade, r);
    out << csv_escape(r.query_id);
    for (std::size_t i = 0; i < k; ++i) {
      out << ',' << format_double(r.confidences[i]) << ',' << (r.correct[i] ? '1' : '0');
      if (with_costs) out << ',' << format_double(r.costs[i]);
    }
    out << '\n';
  }
}

void save_dataset(const ScoreDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write dataset '" + path + "'");
  write_dataset_csv(out, ds);
  if (!out) fail(ErrorKind::Io, "failed writing dataset '" + path + "'");
}

ScoreDataset generate_synthetic(const SyntheticConfig& cfg) {
  const std::size_t k = cfg.marginals.size();
  if (k == 0 || cfg.rhos.size() + 1 != k || cfg.models.size() != k)
    fail(ErrorKind::InvalidArgument, "synthetic config needs k marginals, k models and k-1 correlations");
  if (cfg.n < 1) fail(ErrorKind::InvalidArgument, "synthetic config needs n >= 1");
  if (!(cfg.miscalibration > -1.0) || !std::isfinite(cfg.miscalibration))
    fail(ErrorKind::InvalidArgument, "miscalibration must exceed -1");
  std::vector<PairCopula> copulas;
  for (double r : cfg.rhos) copulas.push_back({CopulaFamily::Gaussian, r});
  const MarkovJointModel truth(cfg.marginals, copulas);
  CascadeSpec spec(cfg.models, cfg.architecture);

  std::mt19937_64 master(cfg.seed);
  const auto draws = sample_joint(truth, cfg.n, derive_seed(master));
  std::mt19937_64 label_rng(derive_seed(master));
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  ScoreDataset ds{cfg.benchmark, spec, SchemaMode::Calibrated, {}, SplitKind::Unsplit};
  ds.records.reserve(cfg.n);
  const int width = static_cast<int>(std::to_string(cfg.n).size());
  for (std::size_t q = 0; q < cfg.n; ++q) {
    std::vector<bool> correct(k);
    for (std::size_t i = 0; i < k; ++i) {
      const double phi = draws[q][i];
      double p = phi;
      if (cfg.miscalibration != 0.0 && phi > 0.0 && phi < 1.0) {
        const double logit = std::log(phi / (1.0 - phi));
        p = 1.0 / (1.0 + std::exp(-(1.0 + cfg.miscalibration) * logit));
      }
      correct[i] = unit(label_rng) < p;
    }
    std::string id = std::to_string(q + 1);
    id = "q" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
    ds.records.push_back(make_record(spec, std::move(id), draws[q], std::move(correct)));
  }
  return ds;
}

std::pair<ScoreDataset, ScoreDataset> split_dataset(const ScoreDataset& ds, std::size_t train_n, std::uint64_t seed) {
  if (train_n == 0 || train_n >= ds.size())
    fail(ErrorKind::InvalidArgument, "train size must be positive and smaller than the dataset");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit uniform draw keeps the order portable across standard libraries.
  for (std::size_t i = idx.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % (i + 1));
    std::swap(idx[i], idx[j]);
  }
  ScoreDataset train{ds.benchmark, ds.cascade, ds.mode, {}, SplitKind::Train};
  ScoreDataset test{ds.benchmark, ds.cascade, ds.mode, {}, SplitKind::Test};
  for (std::size_t r = 0; r < idx.size(); ++r) (r < train_n ? train : test).records.push_back(ds.records[idx[r]]);
  return {std::move(train), std::move(test)};
}

std::vector<CalibrationModel> fit_dataset_calibration(const ScoreDataset& raw, const LogisticOptions& opts) {
  if (raw.mode != SchemaMode::Raw) fail(ErrorKind::InvalidArgument, "calibration is fitted on raw-mode datasets");
  std::vector<CalibrationModel> out;
  for (std::size_t i = 0; i < raw.cascade.size(); ++i) {
    std::vector<std::pair<double, bool>> train;
    train.reserve(raw.size());
    for (const auto& r : raw.records) train.emplace_back(r.confidences[i], r.correct[i]);
    out.push_back(fit_calibration(train, opts));
  }
  return out;
}

ScoreDataset apply_dataset_calibration(const ScoreDataset& raw, const std::vector<CalibrationModel>& models) {
  if (raw.mode != SchemaMode::Raw) fail(ErrorKind::InvalidArgument, "dataset is already calibrated");
  if (models.size() != raw.cascade.size()) fail(ErrorKind::InvalidArgument, "one calibration model per cascade model");
  ScoreDataset out = raw;
  out.mode = SchemaMode::Calibrated;
  for (auto& r : out.records)
    for (std::size_t i = 0; i < models.size(); ++i) r.confidences[i] = apply_calibration(models[i], r.confidences[i]);
  return out;
}

}  // namespace cascade
