#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdhnode/data.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/hypergraph.hpp"
#include "tdhnode/pathways.hpp"

namespace tdhnode {

struct ClusterSpec {
  double proportion = 1.0;
  double rate_multiplier = 1.0;
};

/// Synthetic cohort parameters. Times are in months; hazards are per month.
struct GeneratorConfig {
  std::size_t n_patients = 500;
  PathwaySet pathways = diabetes_pathways();
  std::vector<ClusterSpec> clusters = {{0.5, 1.0}, {0.5, 3.0}};
  std::size_t min_encounters = 8;
  std::size_t max_encounters = 16;
  double mean_gap = 6.0;
  double root_hazard = 0.01;
  double edge_hazard = 0.02;
  double isolated_hazard = 0.002;
  // Per-edge overrides keyed "from->to".
  std::map<std::string, double> edge_hazards;
  std::size_t signal_features = 2;
  double signal_strength = 1.0;
  std::size_t noise_features = 2;
  std::uint64_t seed = 1;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigInvalid, m); };
    if (clusters.empty()) fail("at least one cluster is required");
    double total = 0.0;
    for (const auto& c : clusters) {
      if (!(c.proportion >= 0.0)) fail("cluster proportions must be non-negative");
      if (!(c.rate_multiplier > 0.0)) fail("cluster rate multipliers must be positive");
      total += c.proportion;
    }
    if (!(total > 0.0)) fail("cluster proportions sum to zero");
    if (min_encounters < 1 || max_encounters < min_encounters) fail("need 1 <= min_encounters <= max_encounters");
    if (!(mean_gap > 0.0)) fail("mean_gap must be positive");
    if (root_hazard < 0.0 || edge_hazard < 0.0 || isolated_hazard < 0.0) fail("hazards must be non-negative");
    for (const auto& [k, v] : edge_hazards)
      if (v < 0.0) fail("hazard for " + k + " is negative");
  }
};

inline void to_json(nlohmann::json& j, const GeneratorConfig& g) {
  nlohmann::json clusters = nlohmann::json::array();
  for (const auto& c : g.clusters) clusters.push_back({{"proportion", c.proportion}, {"rate_multiplier", c.rate_multiplier}});
  j = {{"n_patients", g.n_patients},
       {"pathways", g.pathways.to_json()},
       {"clusters", clusters},
       {"min_encounters", g.min_encounters},
       {"max_encounters", g.max_encounters},
       {"mean_gap", g.mean_gap},
       {"root_hazard", g.root_hazard},
       {"edge_hazard", g.edge_hazard},
       {"isolated_hazard", g.isolated_hazard},
       {"edge_hazards", g.edge_hazards},
       {"signal_features", g.signal_features},
       {"signal_strength", g.signal_strength},
       {"noise_features", g.noise_features},
       {"seed", g.seed}};
}

/// "pathways" may be an inline object or a string path / builtin name.
inline void from_json(const nlohmann::json& j, GeneratorConfig& g) {
  GeneratorConfig d;
  g.n_patients = j.value("n_patients", d.n_patients);
  if (j.contains("pathways")) {
    const auto& p = j.at("pathways");
    g.pathways = p.is_string() ? load_pathways(p.get<std::string>()) : PathwaySet::from_json(p);
  }
  if (j.contains("clusters")) {
    g.clusters.clear();
    for (const auto& c : j.at("clusters"))
      g.clusters.push_back({c.value("proportion", 1.0), c.value("rate_multiplier", 1.0)});
  }
  g.min_encounters = j.value("min_encounters", d.min_encounters);
  g.max_encounters = j.value("max_encounters", d.max_encounters);
  g.mean_gap = j.value("mean_gap", d.mean_gap);
  g.root_hazard = j.value("root_hazard", d.root_hazard);
  g.edge_hazard = j.value("edge_hazard", d.edge_hazard);
  g.isolated_hazard = j.value("isolated_hazard", d.isolated_hazard);
  if (j.contains("edge_hazards")) g.edge_hazards = j.at("edge_hazards").get<std::map<std::string, double>>();
  g.signal_features = j.value("signal_features", d.signal_features);
  g.signal_strength = j.value("signal_strength", d.signal_strength);
  g.noise_features = j.value("noise_features", d.noise_features);
  g.seed = j.value("seed", d.seed);
}

inline GeneratorConfig load_generator_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open generator config " + path);
  try {
    nlohmann::json j;
    in >> j;
    GeneratorConfig g = j.get<GeneratorConfig>();
    g.validate();
    return g;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ConfigInvalid, path + ": " + ex.what());
  }
}

/// Latent draw for one patient before it is turned into encounters.
struct SimulatedPatient {
  std::size_t cluster = 0;
  std::vector<double> times;     // encounter times, first at 0
  std::vector<double> onsets;    // continuous onset time per marker, +inf if never
};

/// Onset times in topological order. A marker's onset is the earliest of its
/// competing exponential clocks: one from t = 0 if it starts some trajectory
/// (or sits on none), and one per distinct predecessor edge started at that
/// predecessor's onset. A marker shared by several trajectories therefore
/// onsets once.
class CohortGenerator {
 public:
  explicit CohortGenerator(GeneratorConfig cfg) : cfg_(std::move(cfg)), hg_(cfg_.pathways.build()) {
    cfg_.validate();
    const std::size_t n = hg_.num_markers();
    preds_.assign(n, {});
    is_root_.assign(n, false);
    isolated_.assign(n, true);
    for (const auto& traj : hg_.trajectories()) {
      for (std::size_t p = 0; p < traj.size(); ++p) {
        const std::size_t v = traj.markers[p];
        isolated_[v] = false;
        if (p == 0) {
          is_root_[v] = true;
          continue;
        }
        const std::size_t u = traj.markers[p - 1];
        auto& list = preds_[v];
        if (std::none_of(list.begin(), list.end(), [&](const auto& e) { return e.first == u; })) {
          list.emplace_back(u, edge_rate(u, v));
        }
      }
    }
    for (const auto& [key, _] : cfg_.edge_hazards) {
      const auto arrow = key.find("->");
      if (arrow == std::string::npos) throw Error(ErrorCode::ConfigInvalid, "edge hazard key " + key);
      const std::size_t u = hg_.marker_index(key.substr(0, arrow));
      const std::size_t v = hg_.marker_index(key.substr(arrow + 2));
      const auto& list = preds_[v];
      if (std::none_of(list.begin(), list.end(), [&](const auto& e) { return e.first == u; })) {
        throw Error(ErrorCode::ConfigInvalid, "no trajectory edge " + key);
      }
    }
  }

  const ProgressionHypergraph& hypergraph() const { return hg_; }
  const GeneratorConfig& config() const { return cfg_; }

  /// Per-patient stream derived from (seed, index); patients are independent
  /// of cohort size and generation order.
  std::mt19937_64 patient_rng(std::size_t index) const {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x7d4eu};
    return std::mt19937_64(seq);
  }

  SimulatedPatient simulate(std::size_t index) const {
    std::mt19937_64 rng = patient_rng(index);
    SimulatedPatient sp;
    std::vector<double> props;
    for (const auto& c : cfg_.clusters) props.push_back(c.proportion);
    sp.cluster = std::discrete_distribution<std::size_t>(props.begin(), props.end())(rng);
    const double mult = cfg_.clusters[sp.cluster].rate_multiplier;

    const std::size_t count =
        std::uniform_int_distribution<std::size_t>(cfg_.min_encounters, cfg_.max_encounters)(rng);
    std::exponential_distribution<double> gap(1.0 / cfg_.mean_gap);
    sp.times.push_back(0.0);
    while (sp.times.size() < count) sp.times.push_back(sp.times.back() + gap(rng));

    const double inf = std::numeric_limits<double>::infinity();
    sp.onsets.assign(hg_.num_markers(), inf);
    for (std::size_t v : hg_.topological_order()) {
      double best = inf;
      if (isolated_[v]) best = std::min(best, draw(rng, cfg_.isolated_hazard * mult));
      if (is_root_[v]) best = std::min(best, draw(rng, cfg_.root_hazard * mult));
      for (const auto& [u, rate] : preds_[v]) {
        if (std::isfinite(sp.onsets[u])) best = std::min(best, sp.onsets[u] + draw(rng, rate * mult));
      }
      sp.onsets[v] = best;
    }
    return sp;
  }

  /// Raw cohort record. Signal features centre on strength * log(multiplier)
  /// of the patient's cluster; noise features are standard normal.
  PatientRecord record(std::size_t index) const {
    const SimulatedPatient sp = simulate(index);
    std::mt19937_64 rng = patient_rng(index);
    rng.discard(1u << 20);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double centre = cfg_.signal_strength * std::log(cfg_.clusters[sp.cluster].rate_multiplier);
    PatientRecord rec;
    rec.patient_id = "P" + std::to_string(index);
    rec.meta = {{"cluster", sp.cluster}};
    for (double t : sp.times) {
      RawEncounter e;
      e.t = t;
      for (std::size_t s = 0; s < cfg_.signal_features; ++s) e.x["signal" + std::to_string(s)] = centre + normal(rng);
      for (std::size_t s = 0; s < cfg_.noise_features; ++s) e.x["noise" + std::to_string(s)] = normal(rng);
      for (std::size_t i = 0; i < hg_.num_markers(); ++i)
        if (sp.onsets[i] <= t) e.y.push_back(hg_.marker_name(i));
      rec.encounters.push_back(std::move(e));
    }
    return rec;
  }

  std::vector<PatientRecord> generate() const {
    std::vector<PatientRecord> out;
    out.reserve(cfg_.n_patients);
    for (std::size_t i = 0; i < cfg_.n_patients; ++i) out.push_back(record(i));
    return out;
  }

 private:
  double edge_rate(std::size_t u, std::size_t v) const {
    auto it = cfg_.edge_hazards.find(hg_.marker_name(u) + "->" + hg_.marker_name(v));
    return it == cfg_.edge_hazards.end() ? cfg_.edge_hazard : it->second;
  }

  static double draw(std::mt19937_64& rng, double rate) {
    if (!(rate > 0.0)) return std::numeric_limits<double>::infinity();
    return std::exponential_distribution<double>(rate)(rng);
  }

  GeneratorConfig cfg_;
  ProgressionHypergraph hg_;
  std::vector<std::vector<std::pair<std::size_t, double>>> preds_;
  std::vector<bool> is_root_;
  std::vector<bool> isolated_;
};

inline std::vector<PatientRecord> generate_cohort(const GeneratorConfig& cfg) {
  return CohortGenerator(cfg).generate();
}

}  // namespace tdhnode
