#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdhnode/errors.hpp"
#include "tdhnode/hypergraph.hpp"

namespace tdhnode {

// ---------------------------------------------------------------------------
// Cohort file: one JSON object per line,
//   {"patient_id": "...", "encounters": [{"t": months, "x": {field: number |
//    category | null}, "y": [marker names]}], "meta": {...}}

using FieldValue = std::variant<std::monostate, double, std::string>;

struct RawEncounter {
  double t = 0.0;
  std::map<std::string, FieldValue> x;
  std::vector<std::string> y;
};

struct PatientRecord {
  std::string patient_id;
  std::vector<RawEncounter> encounters;
  nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json to_json(const PatientRecord& rec) {
  nlohmann::json encs = nlohmann::json::array();
  for (const auto& e : rec.encounters) {
    nlohmann::json x = nlohmann::json::object();
    for (const auto& [k, v] : e.x) {
      if (std::holds_alternative<double>(v)) {
        x[k] = std::get<double>(v);
      } else if (std::holds_alternative<std::string>(v)) {
        x[k] = std::get<std::string>(v);
      } else {
        x[k] = nullptr;
      }
    }
    encs.push_back({{"t", e.t}, {"x", x}, {"y", e.y}});
  }
  nlohmann::json j{{"patient_id", rec.patient_id}, {"encounters", encs}};
  if (!rec.meta.empty()) j["meta"] = rec.meta;
  return j;
}

inline PatientRecord record_from_json(const nlohmann::json& j) {
  PatientRecord rec;
  rec.patient_id = j.at("patient_id").get<std::string>();
  for (const auto& e : j.at("encounters")) {
    RawEncounter enc;
    enc.t = e.at("t").get<double>();
    if (e.contains("x")) {
      for (const auto& [k, v] : e.at("x").items()) {
        if (v.is_null()) {
          enc.x[k] = std::monostate{};
        } else if (v.is_number()) {
          enc.x[k] = v.get<double>();
        } else if (v.is_string()) {
          enc.x[k] = v.get<std::string>();
        } else {
          throw nlohmann::json::type_error::create(302, "field " + k + " must be number, string or null", &v);
        }
      }
    }
    if (e.contains("y")) enc.y = e.at("y").get<std::vector<std::string>>();
    rec.encounters.push_back(std::move(enc));
  }
  if (j.contains("meta")) rec.meta = j.at("meta");
  return rec;
}

inline std::vector<PatientRecord> parse_cohort(std::istream& in) {
  std::vector<PatientRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

inline std::vector<PatientRecord> read_cohort(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open cohort file " + path);
  return parse_cohort(in);
}

inline std::string serialize_cohort(const std::vector<PatientRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

inline void write_cohort(const std::vector<PatientRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoError, "cannot write cohort file " + path);
  out << serialize_cohort(records);
}

// ---------------------------------------------------------------------------
// Discretization

struct DiscretizationRule {
  std::string field;
  std::vector<double> thresholds;       // strictly increasing
  std::vector<std::string> categories;  // thresholds.size() + 1, low to high
  std::string default_category;         // used before the first observation

  void validate() const {
    if (categories.size() != thresholds.size() + 1) {
      throw Error(ErrorCode::ConfigInvalid, field + ": need one more category than thresholds");
    }
    for (std::size_t i = 1; i < thresholds.size(); ++i)
      if (!(thresholds[i] > thresholds[i - 1])) {
        throw Error(ErrorCode::ConfigInvalid, field + ": thresholds must be strictly increasing");
      }
    if (std::find(categories.begin(), categories.end(), default_category) == categories.end()) {
      throw Error(ErrorCode::ConfigInvalid, field + ": default category is not a category");
    }
  }

  /// Category for a value: lower bounds are inclusive.
  const std::string& categorize(double v) const {
    const auto idx = std::upper_bound(thresholds.begin(), thresholds.end(), v) - thresholds.begin();
    return categories[static_cast<std::size_t>(idx)];
  }

  std::size_t category_index(const std::string& c) const {
    auto it = std::find(categories.begin(), categories.end(), c);
    if (it == categories.end()) throw Error(ErrorCode::MalformedRecord, field + ": unknown category " + c);
    return static_cast<std::size_t>(it - categories.begin());
  }
};

inline void to_json(nlohmann::json& j, const DiscretizationRule& r) {
  j = {{"field", r.field}, {"thresholds", r.thresholds}, {"categories", r.categories}, {"default", r.default_category}};
}

inline void from_json(const nlohmann::json& j, DiscretizationRule& r) {
  r.field = j.at("field").get<std::string>();
  r.thresholds = j.at("thresholds").get<std::vector<double>>();
  r.categories = j.at("categories").get<std::vector<std::string>>();
  r.default_category = j.value("default", r.categories.empty() ? std::string{} : r.categories.back());
}

/// GFR, HDL and triglyceride categories used for the diabetes cohort.
inline std::vector<DiscretizationRule> clinical_discretization_rules() {
  return {
      {"GFR", {60.0, 90.0}, {"GFR_Decrease_Severe", "GFR_Decrease_Slight", "GFR_NORM"}, "GFR_NORM"},
      {"HDL", {40.0, 60.0}, {"HDL_Bad", "HDL_Normal", "HDL_Good"}, "HDL_Normal"},
      {"Triglycerides",
       {150.0, 199.0},
       {"Triglycerides_Good", "Triglycerides_LowRisk", "Triglycerides_HighRisk"},
       "Triglycerides_Good"},
  };
}

inline std::vector<DiscretizationRule> load_rules(const std::string& path) {
  if (path == "builtin:clinical") return clinical_discretization_rules();
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open rules file " + path);
  try {
    nlohmann::json j;
    in >> j;
    auto rules = j.get<std::vector<DiscretizationRule>>();
    for (const auto& r : rules) r.validate();
    return rules;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ConfigInvalid, path + ": " + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Feature schema: ordered risk-factor columns. Numeric fields give one
// column; discretized fields give one one-hot column per category.

struct FeatureSchema {
  struct Field {
    std::string name;
    std::optional<DiscretizationRule> rule;
  };
  std::vector<Field> fields;

  std::size_t width() const {
    std::size_t w = 0;
    for (const auto& f : fields) w += f.rule ? f.rule->categories.size() : 1;
    return w;
  }

  std::vector<std::string> column_names() const {
    std::vector<std::string> names;
    for (const auto& f : fields) {
      if (f.rule) {
        for (const auto& c : f.rule->categories) names.push_back(c);
      } else {
        names.push_back(f.name);
      }
    }
    return names;
  }

  const DiscretizationRule* rule_for(const std::string& field) const {
    for (const auto& f : fields)
      if (f.name == field && f.rule) return &*f.rule;
    return nullptr;
  }

  /// Fields are the sorted union of keys over all records; a field with a
  /// rule is categorical.
  static FeatureSchema from_records(const std::vector<PatientRecord>& records,
                                    const std::vector<DiscretizationRule>& rules) {
    std::set<std::string> names;
    for (const auto& r : records)
      for (const auto& e : r.encounters)
        for (const auto& [k, _] : e.x) names.insert(k);
    FeatureSchema s;
    for (const auto& name : names) {
      Field f{name, std::nullopt};
      for (const auto& rule : rules)
        if (rule.field == name) f.rule = rule;
      s.fields.push_back(std::move(f));
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& f : fields) {
      nlohmann::json jf{{"name", f.name}};
      if (f.rule) jf["rule"] = *f.rule;
      arr.push_back(jf);
    }
    return arr;
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    FeatureSchema s;
    for (const auto& jf : j) {
      Field f{jf.at("name").get<std::string>(), std::nullopt};
      if (jf.contains("rule")) f.rule = jf.at("rule").get<DiscretizationRule>();
      s.fields.push_back(std::move(f));
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Patient sequences

struct Encounter {
  double t = 0.0;
  std::vector<double> x;
  std::vector<std::uint8_t> y;
};

/// Fixed number of slots; slots past `valid_length` are padding with
/// t = last valid t, x = 0, y = last valid y.
struct PatientSequence {
  std::string patient_id;
  std::vector<Encounter> encounters;
  std::size_t valid_length = 0;
  std::vector<std::uint8_t> valid;  // 1 on the valid prefix
  std::optional<int> cluster;       // generator metadata, when present

  /// First-onset map over the valid prefix.
  OnsetMap onsets(std::size_t n) const {
    std::vector<StatusRecord> recs;
    for (std::size_t k = 0; k < valid_length; ++k) recs.push_back({encounters[k].t, encounters[k].y});
    return onset_map_from_sequence(recs, n, IrreversibilityPolicy::Lenient);
  }
};

struct IngestOptions {
  std::size_t max_length = 20;
  IrreversibilityPolicy policy = IrreversibilityPolicy::Lenient;
};

struct IngestDiagnostics {
  std::size_t leading_imputed = 0;   // values filled from the field default
  std::size_t carried_forward = 0;   // values filled by LOCF
  std::size_t truncated_patients = 0;
  std::size_t reversals_repaired = 0;
};

struct IngestResult {
  std::vector<PatientRecord> processed;
  std::vector<PatientSequence> sequences;
  FeatureSchema schema;
  IngestDiagnostics diagnostics;
};

/// Cleans one record: strictly increasing timestamps, LOCF imputation over
/// the full history, latest `max_length` encounters kept and re-based to
/// t = 0, rule fields discretized, marker statuses made monotone.
inline PatientRecord process_record(const PatientRecord& raw, const FeatureSchema& schema,
                                    const ProgressionHypergraph& hg, const IngestOptions& opt,
                                    IngestDiagnostics& diag) {
  if (raw.encounters.empty()) throw Error(ErrorCode::MalformedRecord, raw.patient_id + ": no encounters");
  for (std::size_t k = 1; k < raw.encounters.size(); ++k) {
    if (!(raw.encounters[k].t > raw.encounters[k - 1].t)) {
      throw Error(ErrorCode::NonIncreasingTimestamps, raw.patient_id);
    }
  }
  PatientRecord rec;
  rec.patient_id = raw.patient_id;
  rec.meta = raw.meta;
  rec.encounters = raw.encounters;

  for (const auto& field : schema.fields) {
    std::optional<FieldValue> last;
    for (auto& e : rec.encounters) {
      auto it = e.x.find(field.name);
      const bool missing = it == e.x.end() || std::holds_alternative<std::monostate>(it->second);
      if (!missing) {
        last = it->second;
        continue;
      }
      if (last) {
        e.x[field.name] = *last;
        ++diag.carried_forward;
      } else {
        e.x[field.name] = field.rule ? FieldValue{field.rule->default_category} : FieldValue{0.0};
        ++diag.leading_imputed;
      }
    }
  }

  if (rec.encounters.size() > opt.max_length) {
    rec.encounters.erase(rec.encounters.begin(),
                         rec.encounters.end() - static_cast<std::ptrdiff_t>(opt.max_length));
    ++diag.truncated_patients;
  }
  const double t0 = rec.encounters.front().t;
  for (auto& e : rec.encounters) e.t -= t0;

  for (auto& e : rec.encounters) {
    for (auto& [name, value] : e.x) {
      const DiscretizationRule* rule = schema.rule_for(name);
      if (!rule) {
        if (std::holds_alternative<std::string>(value)) {
          throw Error(ErrorCode::MalformedRecord, raw.patient_id + ": field " + name + " must be numeric");
        }
        continue;
      }
      if (std::holds_alternative<double>(value)) {
        value = rule->categorize(std::get<double>(value));
      } else {
        rule->category_index(std::get<std::string>(value));  // validates
      }
    }
  }

  std::vector<std::uint8_t> present(hg.num_markers(), 0);
  for (auto& e : rec.encounters) {
    std::vector<std::uint8_t> now(hg.num_markers(), 0);
    for (const auto& name : e.y) now[hg.marker_index(name)] = 1;
    for (std::size_t i = 0; i < now.size(); ++i) {
      if (present[i] && !now[i]) {
        if (opt.policy == IrreversibilityPolicy::Strict) {
          throw Error(ErrorCode::IrreversibilityViolation, raw.patient_id + ": " + hg.marker_name(i));
        }
        ++diag.reversals_repaired;
      }
      present[i] = present[i] || now[i];
    }
    e.y.clear();
    for (std::size_t i = 0; i < present.size(); ++i)
      if (present[i]) e.y.push_back(hg.marker_name(i));
  }
  return rec;
}

/// Feature vector and status vector of a processed record, padded to
/// `max_length` slots.
inline PatientSequence to_sequence(const PatientRecord& rec, const FeatureSchema& schema,
                                   const ProgressionHypergraph& hg, std::size_t max_length) {
  PatientSequence seq;
  seq.patient_id = rec.patient_id;
  if (rec.meta.contains("cluster")) seq.cluster = rec.meta.at("cluster").get<int>();
  const std::size_t len = std::min(rec.encounters.size(), max_length);
  seq.valid_length = len;
  for (std::size_t k = 0; k < len; ++k) {
    const auto& e = rec.encounters[k];
    Encounter enc;
    enc.t = e.t;
    enc.x.reserve(schema.width());
    for (const auto& field : schema.fields) {
      auto it = e.x.find(field.name);
      if (field.rule) {
        std::vector<double> onehot(field.rule->categories.size(), 0.0);
        std::size_t idx = field.rule->category_index(field.rule->default_category);
        if (it != e.x.end()) {
          if (std::holds_alternative<std::string>(it->second)) {
            idx = field.rule->category_index(std::get<std::string>(it->second));
          } else if (std::holds_alternative<double>(it->second)) {
            idx = field.rule->category_index(field.rule->categorize(std::get<double>(it->second)));
          }
        }
        onehot[idx] = 1.0;
        enc.x.insert(enc.x.end(), onehot.begin(), onehot.end());
      } else {
        double v = 0.0;
        if (it != e.x.end() && std::holds_alternative<double>(it->second)) v = std::get<double>(it->second);
        enc.x.push_back(v);
      }
    }
    enc.y.assign(hg.num_markers(), 0);
    for (const auto& name : e.y) enc.y[hg.marker_index(name)] = 1;
    seq.encounters.push_back(std::move(enc));
  }
  if (len == 0) throw Error(ErrorCode::MalformedRecord, rec.patient_id + ": no encounters");
  const Encounter last = seq.encounters.back();
  seq.valid.assign(max_length, 0);
  for (std::size_t k = 0; k < len; ++k) seq.valid[k] = 1;
  while (seq.encounters.size() < max_length) {
    seq.encounters.push_back({last.t, std::vector<double>(schema.width(), 0.0), last.y});
  }
  return seq;
}

inline IngestResult ingest(const std::vector<PatientRecord>& raw, const ProgressionHypergraph& hg,
                           const std::vector<DiscretizationRule>& rules, const IngestOptions& opt = {},
                           const FeatureSchema* fixed_schema = nullptr) {
  for (const auto& r : rules) r.validate();
  IngestResult out;
  out.schema = fixed_schema ? *fixed_schema : FeatureSchema::from_records(raw, rules);
  for (const auto& rec : raw) {
    out.processed.push_back(process_record(rec, out.schema, hg, opt, out.diagnostics));
    out.sequences.push_back(to_sequence(out.processed.back(), out.schema, hg, opt.max_length));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Onset labels

/// Row k of target/mask refers to encounter k; row 0 has no prediction.
struct OnsetLabels {
  std::size_t steps = 0;
  std::size_t n = 0;
  std::vector<std::uint8_t> target;
  std::vector<std::uint8_t> mask;

  std::uint8_t target_at(std::size_t k, std::size_t i) const { return target[k * n + i]; }
  std::uint8_t mask_at(std::size_t k, std::size_t i) const { return mask[k * n + i]; }
  std::size_t evaluated() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

/// target(k, i) = 1 iff marker i first appears at encounter k; (k, i) is
/// evaluated only for valid k >= 1 and markers absent at encounter k - 1.
inline OnsetLabels onset_labels(const PatientSequence& seq, std::size_t n) {
  OnsetLabels lab;
  lab.steps = seq.encounters.size();
  lab.n = n;
  lab.target.assign(lab.steps * n, 0);
  lab.mask.assign(lab.steps * n, 0);
  for (std::size_t k = 1; k < seq.valid_length; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      if (seq.encounters[k - 1].y[i]) continue;
      lab.mask[k * n + i] = 1;
      lab.target[k * n + i] = seq.encounters[k].y[i] ? 1 : 0;
    }
  }
  return lab;
}

// ---------------------------------------------------------------------------
// Cohort statistics

struct CohortStats {
  std::size_t patients = 0;
  std::size_t min_encounters = 0, max_encounters = 0;
  double avg_encounters = 0.0;
  double min_span = 0.0, avg_span = 0.0, max_span = 0.0;
  std::vector<std::string> markers;
  std::vector<double> prevalence;  // fraction of patients with the marker at their last encounter
  std::vector<double> onset_rate;  // fraction of patients whose first onset comes after the first encounter
};

inline CohortStats cohort_stats(const std::vector<PatientRecord>& records, const ProgressionHypergraph& hg) {
  CohortStats s;
  s.patients = records.size();
  const std::size_t n = hg.num_markers();
  for (std::size_t i = 0; i < n; ++i) s.markers.push_back(hg.marker_name(i));
  s.prevalence.assign(n, 0.0);
  s.onset_rate.assign(n, 0.0);
  if (records.empty()) return s;
  s.min_encounters = std::numeric_limits<std::size_t>::max();
  s.min_span = std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    const std::size_t c = r.encounters.size();
    s.min_encounters = std::min(s.min_encounters, c);
    s.max_encounters = std::max(s.max_encounters, c);
    s.avg_encounters += static_cast<double>(c);
    const double span = c ? r.encounters.back().t - r.encounters.front().t : 0.0;
    s.min_span = std::min(s.min_span, span);
    s.max_span = std::max(s.max_span, span);
    s.avg_span += span;
    std::vector<std::uint8_t> first(n, 0), ever(n, 0);
    for (std::size_t k = 0; k < c; ++k)
      for (const auto& name : r.encounters[k].y) {
        const std::size_t i = hg.marker_index(name);
        if (k == 0) first[i] = 1;
        ever[i] = 1;
      }
    for (std::size_t i = 0; i < n; ++i) {
      if (c && std::find(r.encounters.back().y.begin(), r.encounters.back().y.end(), hg.marker_name(i)) !=
                   r.encounters.back().y.end())
        s.prevalence[i] += 1.0;
      if (ever[i] && !first[i]) s.onset_rate[i] += 1.0;
    }
  }
  const double np = static_cast<double>(records.size());
  s.avg_encounters /= np;
  s.avg_span /= np;
  for (std::size_t i = 0; i < n; ++i) {
    s.prevalence[i] /= np;
    s.onset_rate[i] /= np;
  }
  return s;
}

/// Two-section CSV: summary rows then per-marker rows.
inline std::string stats_csv(const CohortStats& s) {
  std::ostringstream out;
  out << "statistic,min,avg,max\n";
  out << "encounters," << s.min_encounters << "," << s.avg_encounters << "," << s.max_encounters << "\n";
  out << "span_months," << s.min_span << "," << s.avg_span << "," << s.max_span << "\n";
  out << "\nmarker,prevalence,onset_rate\n";
  for (std::size_t i = 0; i < s.markers.size(); ++i)
    out << "\"" << s.markers[i] << "\"," << s.prevalence[i] << "," << s.onset_rate[i] << "\n";
  return out.str();
}

}  // namespace tdhnode
