#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "tdhnode/tdhnode.hpp"

namespace tdhnode::testing {

/// Two trajectories over five markers: HP -> AF -> HF and HP -> CD -> S.
inline ProgressionHypergraph two_path_hypergraph() {
  return build_progression_hypergraph({{"HP", "AF", "HF"}, {"HP", "CD", "S"}}, {"HP", "AF", "HF", "CD", "S"});
}

/// HP from t1, CD from t2, AF from t3, S from t4, HF never; t_k = k months
/// after the first encounter at 0.
inline std::vector<StatusRecord> two_path_statuses() {
  // order: HP AF HF CD S
  return {{0.0, {1, 0, 0, 0, 0}},
          {1.0, {1, 0, 0, 1, 0}},
          {2.0, {1, 1, 0, 1, 0}},
          {3.0, {1, 1, 0, 1, 1}},
          {4.0, {1, 1, 0, 1, 1}}};
}

inline OnsetMap two_path_statuses_onsets() { return onset_map_from_sequence(two_path_statuses(), 5); }

/// Hand-built sequence; `x` rows must all have the same width.
inline PatientSequence make_sequence(const std::string& id, const std::vector<double>& t,
                                     const std::vector<std::vector<std::uint8_t>>& y,
                                     const std::vector<std::vector<double>>& x, std::size_t max_length = 20) {
  PatientSequence s;
  s.patient_id = id;
  s.valid_length = t.size();
  for (std::size_t k = 0; k < t.size(); ++k) s.encounters.push_back({t[k], x[k], y[k]});
  const Encounter last = s.encounters.back();
  s.valid.assign(max_length, 0);
  for (std::size_t k = 0; k < t.size(); ++k) s.valid[k] = 1;
  while (s.encounters.size() < max_length)
    s.encounters.push_back({last.t, std::vector<double>(last.x.size(), 0.0), last.y});
  return s;
}

inline PatientSequence two_path_sequence(std::size_t n_risk = 3) {
  std::vector<double> t;
  std::vector<std::vector<std::uint8_t>> y;
  std::vector<std::vector<double>> x;
  for (const auto& r : two_path_statuses()) {
    t.push_back(r.t);
    y.push_back(r.status);
    std::vector<double> row(n_risk);
    for (std::size_t c = 0; c < n_risk; ++c) row[c] = std::sin(1.3 * r.t + static_cast<double>(c));
    x.push_back(row);
  }
  return make_sequence("demo", t, y, x);
}

inline ModelConfig small_config(std::size_t n, std::size_t c, int d = 8, int heads = 2) {
  ModelConfig cfg;
  cfg.n_markers = n;
  cfg.n_risk = c;
  cfg.dim = d;
  cfg.heads = heads;
  cfg.dropout = 0.0;
  return cfg;
}

/// Four markers on trajectories A -> B -> C and D -> C, three encounters.
/// At t0 the second hyperedge has no observed marker, so the virtual start
/// query is exercised.
inline ProgressionHypergraph gradient_hypergraph() {
  return build_progression_hypergraph({{"A", "B", "C"}, {"D", "C"}}, {"A", "B", "C", "D"});
}

inline PatientSequence gradient_sequence() {
  return make_sequence("grad", {0.0, 60.0, 150.0}, {{1, 0, 0, 0}, {1, 1, 0, 0}, {1, 1, 0, 1}},
                       {{0.3, -1.2}, {0.8, 0.1}, {-0.5, 0.9}}, 3);
}

/// Small cohort generator config over an 8-marker, 3-trajectory pathway set.
inline GeneratorConfig toy_generator(std::size_t patients, std::uint64_t seed) {
  GeneratorConfig g;
  g.n_patients = patients;
  g.pathways.name = "toy";
  g.pathways.markers = {"M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8"};
  g.pathways.trajectories = {{"M1", "M2", "M3", "M4"}, {"M1", "M5", "M6"}, {"M7", "M8", "M3"}};
  g.clusters = {{0.5, 1.0}, {0.5, 5.0}};
  g.min_encounters = 10;
  g.max_encounters = 14;
  g.mean_gap = 6.0;
  g.root_hazard = 0.02;
  g.edge_hazard = 0.06;
  g.isolated_hazard = 0.0;
  g.seed = seed;
  return g;
}

/// Code of the tdhnode::Error thrown by `f`; records a failure if none is.
inline ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no tdhnode::Error thrown";
  return ErrorCode::IoError;
}

}  // namespace tdhnode::testing
