#include "causalmeta/data_model.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace causalmeta {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& text, const std::string& where) {
  double value = 0.0;
  const char* begin = text.data();
  const char* end = text.data() + text.size();
  if (!text.empty() && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (text.empty() || ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw ValidationError(where + ": cannot parse '" + text + "' as a number");
  }
  return value;
}

int parse_binary(const std::string& text, const std::string& where) {
  const double v = parse_number(text, where);
  if (v != 0.0 && v != 1.0) {
    throw ValidationError(where + ": value '" + text + "' is not binary (0/1)");
  }
  return static_cast<int>(v);
}

std::string format_number(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void check_moment_inequality(const Vector& mean, const Vector& raw2,
                             const std::string& where) {
  for (Index c = 0; c < mean.size(); ++c) {
    const double sq = mean[c] * mean[c];
    if (raw2[c] < sq - 1e-12 * std::max(1.0, sq)) {
      throw ValidationError(where + ": covariate l" + std::to_string(c + 1) +
                            " has raw second moment " + format_number(raw2[c]) +
                            " below squared mean " + format_number(sq));
    }
  }
}

Vector vector_from_json(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key) || !j.at(key).is_array()) {
    throw ValidationError("aggregated record: missing array '" + key + "'");
  }
  const auto& arr = j.at(key);
  Vector v(static_cast<Index>(arr.size()));
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) {
      throw ValidationError("aggregated record: '" + key + "' entry " +
                            std::to_string(i) + " is not a number");
    }
    v[static_cast<Index>(i)] = arr[i].get<double>();
  }
  return v;
}

std::vector<double> to_std(const Vector& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

}  // namespace

Index IpdTrial::arm_size(int x) const {
  return static_cast<Index>((treatment.array() == x).count());
}

void IpdTrial::validate() const {
  const Index n = covariates.rows();
  const std::string who = "study " + std::to_string(study_id);
  if (n < 2) throw ValidationError(who + ": needs at least 2 participants");
  if (treatment.size() != n || outcome.size() != n) {
    throw ValidationError(who + ": treatment/outcome length mismatch");
  }
  for (Index i = 0; i < n; ++i) {
    if (treatment[i] != 0 && treatment[i] != 1) {
      throw ValidationError(who + ": row " + std::to_string(i + 1) +
                            " has non-binary treatment");
    }
    if (outcome[i] != 0 && outcome[i] != 1) {
      throw ValidationError(who + ": row " + std::to_string(i + 1) +
                            " has non-binary outcome");
    }
  }
  if (!covariates.allFinite()) {
    throw ValidationError(who + ": covariates contain missing or non-finite cells");
  }
  if (arm_size(0) == 0 || arm_size(1) == 0) {
    throw ValidationError(who + ": both treatment arms must be non-empty");
  }
}

void AggregatedTrial::validate() const {
  const std::string who = "aggregated study " + std::to_string(study_id);
  const Index p = arms[0].mean_l.size();
  for (int x = 0; x < 2; ++x) {
    const auto& arm = arms[static_cast<std::size_t>(x)];
    const std::string where = who + " arm " + std::to_string(x);
    if (arm.x != x) throw ValidationError(where + ": arm label mismatch");
    if (arm.n < 1) throw ValidationError(where + ": arm size must be >= 1");
    if (arm.mean_l.size() != p || arm.raw2_l.size() != p) {
      throw ValidationError(where + ": covariate dimension mismatch");
    }
    if (!(arm.mean_y >= 0.0 && arm.mean_y <= 1.0)) {
      throw ValidationError(where + ": outcome mean outside [0, 1]");
    }
    if (!arm.mean_l.allFinite() || !arm.raw2_l.allFinite()) {
      throw ValidationError(where + ": non-finite covariate moment");
    }
    check_moment_inequality(arm.mean_l, arm.raw2_l, where);
  }
  if (allocation[0] < 0.0 || allocation[1] < 0.0 ||
      std::abs(allocation[0] + allocation[1] - 1.0) > 1e-6) {
    throw ValidationError(who + ": allocation probabilities must sum to 1");
  }
  if (!(own_effect.se > 0.0) || !std::isfinite(own_effect.estimate)) {
    throw ValidationError(who + ": own effect needs a finite estimate and se > 0");
  }
}

PooledMoments pool_arm_moments(const AggregatedTrial& trial) {
  const double r0 = trial.allocation[0];
  const double r1 = trial.allocation[1];
  return {r0 * trial.arms[0].mean_l + r1 * trial.arms[1].mean_l,
          r0 * trial.arms[0].raw2_l + r1 * trial.arms[1].raw2_l};
}

OwnEffect crude_effect(const IpdTrial& trial, EffectScale scale) {
  std::array<double, 2> risk{};
  std::array<double, 2> count{};
  for (Index i = 0; i < trial.size(); ++i) {
    const auto x = static_cast<std::size_t>(trial.treatment[i]);
    risk[x] += trial.outcome[i];
    count[x] += 1.0;
  }
  for (int x = 0; x < 2; ++x) risk[x] /= count[x];
  OwnEffect eff;
  eff.scale = scale;
  eff.estimate = effect_from_risks(scale, risk[1], risk[0]);
  double var = 0.0;
  for (int x = 0; x < 2; ++x) {
    const double p = risk[x];
    const double n = count[x];
    switch (scale) {
      case EffectScale::kRiskDifference:
        var += p * (1.0 - p) / n;
        break;
      case EffectScale::kLogRelativeRisk:
        var += (1.0 - p) / (n * p);
        break;
      case EffectScale::kLogOddsRatio:
        var += 1.0 / (n * p) + 1.0 / (n * (1.0 - p));
        break;
    }
  }
  eff.se = std::sqrt(var);
  return eff;
}

AggregatedTrial summarize(const IpdTrial& trial, EffectScale scale) {
  trial.validate();
  AggregatedTrial agg;
  agg.study_id = trial.study_id;
  const Index p = trial.num_covariates();
  for (int x = 0; x < 2; ++x) {
    auto& arm = agg.arms[static_cast<std::size_t>(x)];
    arm.x = x;
    arm.mean_l = Vector::Zero(p);
    arm.raw2_l = Vector::Zero(p);
    double events = 0.0;
    for (Index i = 0; i < trial.size(); ++i) {
      if (trial.treatment[i] != x) continue;
      const auto row = trial.covariates.row(i).transpose();
      arm.mean_l += row;
      arm.raw2_l += row.cwiseProduct(row);
      events += trial.outcome[i];
      ++arm.n;
    }
    arm.mean_l /= arm.n;
    arm.raw2_l /= arm.n;
    arm.mean_y = events / arm.n;
  }
  const double n = agg.size();
  agg.allocation = {agg.arms[0].n / n, agg.arms[1].n / n};
  agg.own_effect = crude_effect(trial, scale);
  return agg;
}

IpdTrial parse_ipd_csv(std::istream& in, const std::string& source_name) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ValidationError(source_name + ": empty file");
  }
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) {
    line = line.substr(3);  // UTF-8 BOM
  }
  const auto header = split_csv_line(line);
  const std::vector<std::string> leading = {"study", "treat", "outcome"};
  for (std::size_t c = 0; c < leading.size(); ++c) {
    if (c >= header.size() || header[c] != leading[c]) {
      throw ValidationError(source_name + ": missing column '" + leading[c] +
                            "' at position " + std::to_string(c + 1));
    }
  }
  std::size_t num_cov = 0;
  bool pseudo_column = false;
  for (std::size_t c = 3; c < header.size(); ++c) {
    if (header[c] == "l" + std::to_string(num_cov + 1)) {
      if (pseudo_column) {
        throw ValidationError(source_name + ": column '" + header[c] +
                              "' after the pseudo marker");
      }
      ++num_cov;
    } else if (header[c] == "pseudo" && c + 1 == header.size()) {
      pseudo_column = true;
    } else {
      throw ValidationError(source_name + ": unexpected column '" + header[c] +
                            "' (expected l" + std::to_string(num_cov + 1) + ")");
    }
  }
  if (num_cov == 0) throw ValidationError(source_name + ": no covariate columns");

  std::vector<double> cov;
  std::vector<int> treat;
  std::vector<int> outcome;
  int study = 0;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto cells = split_csv_line(line);
    const std::string where = source_name + " row " + std::to_string(row);
    if (cells.size() != header.size()) {
      throw ValidationError(where + ": expected " +
                            std::to_string(header.size()) + " cells, found " +
                            std::to_string(cells.size()));
    }
    const double sid = parse_number(cells[0], where + " column 'study'");
    if (sid != std::floor(sid)) {
      throw ValidationError(where + " column 'study': not an integer");
    }
    if (row == 1) {
      study = static_cast<int>(sid);
    } else if (static_cast<int>(sid) != study) {
      throw ValidationError(where + " column 'study': mixes study ids " +
                            std::to_string(study) + " and " + cells[0]);
    }
    treat.push_back(parse_binary(cells[1], where + " column 'treat'"));
    outcome.push_back(parse_binary(cells[2], where + " column 'outcome'"));
    for (std::size_t c = 0; c < num_cov; ++c) {
      cov.push_back(parse_number(cells[3 + c], where + " column '" + header[3 + c] + "'"));
    }
  }
  IpdTrial trial;
  trial.study_id = study;
  const auto n = static_cast<Index>(row);
  trial.covariates = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                              Eigen::RowMajor>>(
      cov.data(), n, static_cast<Index>(num_cov));
  trial.treatment = Eigen::Map<IntVector>(treat.data(), n);
  trial.outcome = Eigen::Map<IntVector>(outcome.data(), n);
  try {
    trial.validate();
  } catch (const ValidationError& e) {
    throw ValidationError(source_name + ": " + e.what());
  }
  return trial;
}

IpdTrial load_ipd(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open IPD file " + path.string());
  return parse_ipd_csv(in, path.string());
}

void write_ipd_csv(std::ostream& out, const IpdTrial& trial, bool pseudo_marker) {
  out << "study,treat,outcome";
  for (Index c = 0; c < trial.num_covariates(); ++c) out << ",l" << c + 1;
  if (pseudo_marker) out << ",pseudo";
  out << '\n';
  for (Index i = 0; i < trial.size(); ++i) {
    out << trial.study_id << ',' << trial.treatment[i] << ',' << trial.outcome[i];
    for (Index c = 0; c < trial.num_covariates(); ++c) {
      out << ',' << format_number(trial.covariates(i, c));
    }
    if (pseudo_marker) out << ",1";
    out << '\n';
  }
}

void save_ipd(const std::filesystem::path& path, const IpdTrial& trial,
              bool pseudo_marker) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  write_ipd_csv(out, trial, pseudo_marker);
}

AggregatedTrial aggregated_from_json(const nlohmann::json& doc) {
  for (const char* key : {"study_id", "arms", "allocation", "own_effect"}) {
    if (!doc.contains(key)) {
      throw ValidationError(std::string("aggregated record: missing key '") +
                            key + "'");
    }
  }
  AggregatedTrial agg;
  agg.study_id = doc.at("study_id").get<int>();
  const auto& arms = doc.at("arms");
  if (!arms.is_array() || arms.size() != 2) {
    throw ValidationError("aggregated record: 'arms' must list two arms");
  }
  // Pooled-only reports: arm moments are filled with the pooled values,
  // which pool back to themselves for any allocation.
  std::optional<PooledMoments> pooled;
  if (doc.contains("pooled")) {
    pooled = PooledMoments{vector_from_json(doc.at("pooled"), "mean_l"),
                           vector_from_json(doc.at("pooled"), "raw2_l")};
  }
  std::set<int> seen;
  for (const auto& a : arms) {
    const int x = a.at("x").get<int>();
    if ((x != 0 && x != 1) || !seen.insert(x).second) {
      throw ValidationError("aggregated record: arms must be x=0 and x=1");
    }
    auto& arm = agg.arms[static_cast<std::size_t>(x)];
    arm.x = x;
    arm.n = a.at("n").get<int>();
    if (a.contains("mean_l")) {
      arm.mean_l = vector_from_json(a, "mean_l");
      arm.raw2_l = vector_from_json(a, "raw2_l");
    } else if (pooled) {
      arm.mean_l = pooled->mean;
      arm.raw2_l = pooled->raw2;
    } else {
      throw ValidationError("aggregated record: arm " + std::to_string(x) +
                            " has no covariate moments");
    }
    arm.mean_y = a.at("mean_y").get<double>();
  }
  const auto& alloc = doc.at("allocation");
  if (!alloc.is_array() || alloc.size() != 2) {
    throw ValidationError("aggregated record: 'allocation' must be [r0, r1]");
  }
  agg.allocation = {alloc[0].get<double>(), alloc[1].get<double>()};
  const auto& own = doc.at("own_effect");
  agg.own_effect.scale = parse_effect_scale(own.at("scale").get<std::string>());
  agg.own_effect.estimate = own.at("est").get<double>();
  agg.own_effect.se = own.at("se").get<double>();
  agg.validate();
  return agg;
}

nlohmann::json to_json(const AggregatedTrial& trial) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& arm : trial.arms) {
    arms.push_back({{"x", arm.x},
                    {"n", arm.n},
                    {"mean_l", to_std(arm.mean_l)},
                    {"raw2_l", to_std(arm.raw2_l)},
                    {"mean_y", arm.mean_y}});
  }
  return {{"study_id", trial.study_id},
          {"arms", arms},
          {"allocation", {trial.allocation[0], trial.allocation[1]}},
          {"own_effect",
           {{"scale", to_string(trial.own_effect.scale)},
            {"est", trial.own_effect.estimate},
            {"se", trial.own_effect.se}}}};
}

AggregatedTrial load_agg(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open aggregated file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
  try {
    return aggregated_from_json(doc);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

StudyCollection::StudyCollection(std::vector<AggregatedTrial> aggregated,
                                 std::vector<IpdTrial> ipd)
    : aggregated_(std::move(aggregated)), ipd_(std::move(ipd)) {
  if (ipd_.empty()) {
    throw ValidationError("at least one trial with participant data is required");
  }
  num_covariates_ = ipd_.front().num_covariates();
  std::set<int> ids;
  auto register_id = [&](int id) {
    if (!ids.insert(id).second) {
      throw ValidationError("duplicate study id " + std::to_string(id));
    }
    original_ids_.push_back(id);
  };
  int next = 1;
  for (auto& a : aggregated_) {
    a.validate();
    if (a.num_covariates() != num_covariates_) {
      throw ValidationError("study " + std::to_string(a.study_id) +
                            ": covariate set differs from the other trials");
    }
    register_id(a.study_id);
    a.study_id = next++;
  }
  for (auto& t : ipd_) {
    t.validate();
    if (t.num_covariates() != num_covariates_) {
      throw ValidationError("study " + std::to_string(t.study_id) +
                            ": covariate set differs from the other trials");
    }
    register_id(t.study_id);
    t.study_id = next++;
  }
}

double StudyCollection::total_size() const {
  double n = 0.0;
  for (int s = 1; s <= q(); ++s) n += study_size(s);
  return n;
}

const AggregatedTrial& StudyCollection::aggregated(int study) const {
  if (study < 1 || study > z()) {
    throw ValidationError("study " + std::to_string(study) + " has no aggregated record");
  }
  return aggregated_[static_cast<std::size_t>(study - 1)];
}

const IpdTrial& StudyCollection::ipd(int study) const {
  if (study <= z() || study > q()) {
    throw ValidationError("study " + std::to_string(study) + " has no participant data");
  }
  return ipd_[static_cast<std::size_t>(study - z() - 1)];
}

double StudyCollection::study_size(int study) const {
  return has_ipd(study) ? static_cast<double>(ipd(study).size())
                        : static_cast<double>(aggregated(study).size());
}

int StudyCollection::original_id(int study) const {
  if (study < 1 || study > q()) {
    throw ValidationError("unknown study " + std::to_string(study));
  }
  return original_ids_[static_cast<std::size_t>(study - 1)];
}

}  // namespace causalmeta
