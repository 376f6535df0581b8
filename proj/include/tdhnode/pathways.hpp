#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdhnode/errors.hpp"
#include "tdhnode/hypergraph.hpp"

namespace tdhnode {

/// Pathway definition file:
///   {"name": "...", "markers": [names...], "trajectories": [[names...], ...]}
/// "markers" is optional; when present it fixes the node order and may list
/// markers that sit on no trajectory.
struct PathwaySet {
  std::string name;
  std::vector<std::string> markers;
  std::vector<std::vector<std::string>> trajectories;

  ProgressionHypergraph build() const { return build_progression_hypergraph(trajectories, markers); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["name"] = name;
    if (!markers.empty()) j["markers"] = markers;
    j["trajectories"] = trajectories;
    return j;
  }

  static PathwaySet from_json(const nlohmann::json& j) {
    PathwaySet p;
    try {
      p.name = j.value("name", std::string{});
      if (j.contains("markers")) p.markers = j.at("markers").get<std::vector<std::string>>();
      p.trajectories = j.at("trajectories").get<std::vector<std::vector<std::string>>>();
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::ConfigInvalid, std::string("pathway file: ") + ex.what());
    }
    return p;
  }
};

/// Diabetes complication pathways over 21 markers. The clinical source joins
/// hypertension and poor blood pressure into one pathway step; the step is
/// carried by "Hypertension" and "Poor BP" stays an isolated marker, as does
/// "Cancer".
inline PathwaySet diabetes_pathways() {
  PathwaySet p;
  p.name = "diabetes";
  p.markers = {"HbA1c Low",
               "HbA1c High",
               "Hypoglycemia",
               "Obesity",
               "Nephropathy",
               "Neuropathy",
               "Foot Ulcer",
               "Cancer",
               "Hypertension",
               "Poor Lipid",
               "Poor BP",
               "Retinopathy",
               "Depression",
               "DKA",
               "Visual Impairment",
               "Blindness and Vision Loss",
               "Cerebrovascular Disease",
               "Stroke",
               "Atrial Fibrillation",
               "Cardiac Revascularization",
               "Heart Failure"};
  p.trajectories = {
      {"HbA1c High", "Poor Lipid", "Hypertension", "Atrial Fibrillation", "Heart Failure"},
      {"HbA1c High", "Obesity"},
      {"HbA1c High", "Retinopathy", "Visual Impairment", "Blindness and Vision Loss"},
      {"HbA1c Low", "Hypoglycemia"},
      {"HbA1c High", "DKA"},
      {"HbA1c High", "Poor Lipid", "Hypertension", "Cardiac Revascularization"},
      {"HbA1c High", "Depression"},
      {"HbA1c High", "Poor Lipid", "Hypertension", "Cerebrovascular Disease", "Stroke"},
      {"HbA1c High", "Neuropathy", "Foot Ulcer"},
      {"HbA1c High", "Nephropathy"},
  };
  return p;
}

inline PathwaySet cardiovascular_pathways() {
  PathwaySet p;
  p.name = "cardiovascular";
  p.markers = {"Hypertension", "Atrial Fibrillation", "Heart Failure", "Cerebrovascular Disease/Stroke",
               "Myocardial Infarction"};
  p.trajectories = {
      {"Hypertension", "Atrial Fibrillation", "Heart Failure"},
      {"Hypertension", "Myocardial Infarction", "Heart Failure"},
      {"Hypertension", "Cerebrovascular Disease/Stroke"},
  };
  return p;
}

inline PathwaySet load_pathways(const std::string& path) {
  if (path == "builtin:diabetes") return diabetes_pathways();
  if (path == "builtin:cardiovascular") return cardiovascular_pathways();
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open pathway file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ConfigInvalid, path + ": " + ex.what());
  }
  return PathwaySet::from_json(j);
}

inline void save_pathways(const PathwaySet& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path);
  out << p.to_json().dump(2) << "\n";
}

}  // namespace tdhnode
