#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "tdhnode/errors.hpp"

namespace tdhnode {

struct MarkerId {
  std::size_t index = 0;
  std::string name;
};

/// An ordered, duplicate-free list of marker indices. Position 0 is the
/// entry point of the pathway.
struct Trajectory {
  std::size_t id = 0;
  std::vector<std::size_t> markers;

  std::size_t size() const { return markers.size(); }
};

/// Onset timestamp of a marker in months, or nullopt when the marker has not
/// been observed. Never encoded as an infinity.
using Onset = std::optional<double>;
using OnsetMap = std::vector<Onset>;

inline bool observed_by(const Onset& onset, double t) { return onset.has_value() && *onset <= t; }

/// FNV-1a, 64 bit. Used to fingerprint pathway definitions.
inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Static clinical knowledge: n markers and m ordered trajectories. The union
/// of consecutive-marker edges over all trajectories is a DAG.
class ProgressionHypergraph {
 public:
  ProgressionHypergraph() = default;

  /// Builds from trajectory definitions given as marker-name lists. When
  /// `marker_names` is empty the marker universe is the order of first
  /// appearance; otherwise every trajectory name must resolve against it and
  /// markers outside every trajectory are kept as isolated nodes.
  static ProgressionHypergraph build(const std::vector<std::vector<std::string>>& trajectory_defs,
                                     const std::vector<std::string>& marker_names = {}) {
    ProgressionHypergraph hg;
    const bool closed_universe = !marker_names.empty();
    for (const auto& name : marker_names) {
      if (hg.index_.contains(name)) {
        throw Error(ErrorCode::ConfigInvalid, "marker listed twice: " + name);
      }
      hg.index_.emplace(name, hg.markers_.size());
      hg.markers_.push_back({hg.markers_.size(), name});
    }
    for (std::size_t j = 0; j < trajectory_defs.size(); ++j) {
      const auto& def = trajectory_defs[j];
      if (def.size() < 2) {
        throw Error(ErrorCode::ConfigInvalid,
                    "trajectory " + std::to_string(j) + " needs at least two markers");
      }
      Trajectory traj{j, {}};
      for (const auto& name : def) {
        auto it = hg.index_.find(name);
        if (it == hg.index_.end()) {
          if (closed_universe) throw Error(ErrorCode::UnknownMarkerName, name);
          it = hg.index_.emplace(name, hg.markers_.size()).first;
          hg.markers_.push_back({hg.markers_.size(), name});
        }
        if (std::find(traj.markers.begin(), traj.markers.end(), it->second) != traj.markers.end()) {
          throw Error(ErrorCode::DuplicateMarkerInTrajectory,
                      name + " repeats in trajectory " + std::to_string(j));
        }
        traj.markers.push_back(it->second);
      }
      hg.trajectories_.push_back(std::move(traj));
    }
    hg.topo_order_ = hg.compute_topological_order();
    hg.memberships_.assign(hg.markers_.size(), {});
    for (const auto& traj : hg.trajectories_) {
      for (std::size_t p = 0; p < traj.size(); ++p) hg.memberships_[traj.markers[p]].push_back({traj.id, p});
    }
    return hg;
  }

  std::size_t num_markers() const { return markers_.size(); }
  std::size_t num_trajectories() const { return trajectories_.size(); }
  const std::vector<MarkerId>& markers() const { return markers_; }
  const std::vector<Trajectory>& trajectories() const { return trajectories_; }
  const Trajectory& trajectory(std::size_t j) const { return trajectories_.at(j); }
  const std::string& marker_name(std::size_t i) const { return markers_.at(i).name; }

  std::size_t marker_index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error(ErrorCode::UnknownMarkerName, name);
    return it->second;
  }
  bool has_marker(const std::string& name) const { return index_.contains(name); }

  /// (trajectory id, position) pairs for every trajectory containing marker i.
  const std::vector<std::pair<std::size_t, std::size_t>>& memberships(std::size_t i) const {
    return memberships_.at(i);
  }

  std::size_t max_trajectory_length() const {
    std::size_t len = 0;
    for (const auto& t : trajectories_) len = std::max(len, t.size());
    return len;
  }

  /// A topological order of the consecutive-edge union.
  const std::vector<std::size_t>& topological_order() const { return topo_order_; }

  /// Canonical text form: one marker per line, then one trajectory per line.
  /// Two definitions with the same canonical text describe the same hypergraph.
  std::string canonical_text() const {
    std::string out = "markers\n";
    for (const auto& m : markers_) out += m.name + "\n";
    out += "trajectories\n";
    for (const auto& t : trajectories_) {
      for (std::size_t p = 0; p < t.size(); ++p) {
        if (p) out += " -> ";
        out += markers_[t.markers[p]].name;
      }
      out += "\n";
    }
    return out;
  }

  std::uint64_t fingerprint() const { return fnv1a64(canonical_text()); }

 private:
  std::vector<std::size_t> compute_topological_order() const {
    const std::size_t n = markers_.size();
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<std::size_t> indegree(n, 0);
    for (const auto& t : trajectories_) {
      for (std::size_t p = 0; p + 1 < t.size(); ++p) {
        auto& succ = out[t.markers[p]];
        if (std::find(succ.begin(), succ.end(), t.markers[p + 1]) == succ.end()) {
          succ.push_back(t.markers[p + 1]);
          ++indegree[t.markers[p + 1]];
        }
      }
    }
    // Kahn's algorithm; ties resolved by marker index for a stable order.
    std::vector<std::size_t> order;
    std::vector<std::size_t> ready;
    for (std::size_t i = 0; i < n; ++i)
      if (indegree[i] == 0) ready.push_back(i);
    while (!ready.empty()) {
      auto it = std::min_element(ready.begin(), ready.end());
      const std::size_t v = *it;
      ready.erase(it);
      order.push_back(v);
      for (std::size_t w : out[v])
        if (--indegree[w] == 0) ready.push_back(w);
    }
    if (order.size() != n) {
      std::string cyc;
      for (std::size_t i = 0; i < n; ++i)
        if (indegree[i] > 0) cyc += (cyc.empty() ? "" : ", ") + markers_[i].name;
      throw Error(ErrorCode::CycleDetected, "markers on a cycle: " + cyc);
    }
    return order;
  }

  std::vector<MarkerId> markers_;
  std::vector<Trajectory> trajectories_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::size_t> topo_order_;
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> memberships_;
};

inline ProgressionHypergraph build_progression_hypergraph(
    const std::vector<std::vector<std::string>>& trajectory_defs,
    const std::vector<std::string>& marker_names = {}) {
  return ProgressionHypergraph::build(trajectory_defs, marker_names);
}

/// n x m matrix with H(i,e) = 1 iff marker i lies on trajectory e.
template <class T = double>
Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> binary_incidence(const ProgressionHypergraph& hg) {
  Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic> h =
      Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>::Zero(hg.num_markers(), hg.num_trajectories());
  for (const auto& t : hg.trajectories())
    for (std::size_t v : t.markers) h(v, t.id) = T(1);
  return h;
}

enum class IrreversibilityPolicy { Lenient, Strict };

struct OnsetDiagnostics {
  std::size_t reversals = 0;  // 1 -> 0 transitions seen in lenient mode
};

struct StatusRecord {
  double t = 0.0;
  std::vector<std::uint8_t> status;
};

/// Earliest timestamp with status 1 per marker. Strict mode rejects any
/// 1 -> 0 transition; lenient mode keeps the first onset and counts it.
inline OnsetMap onset_map_from_sequence(std::span<const StatusRecord> records, std::size_t n,
                                        IrreversibilityPolicy policy = IrreversibilityPolicy::Lenient,
                                        OnsetDiagnostics* diagnostics = nullptr) {
  OnsetMap onset(n);
  std::vector<std::uint8_t> previous(n, 0);
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& rec = records[k];
    if (rec.status.size() != n) {
      throw Error(ErrorCode::DimensionMismatch, "status vector length " + std::to_string(rec.status.size()) +
                                                    " != " + std::to_string(n));
    }
    if (k > 0 && !(rec.t > records[k - 1].t)) {
      throw Error(ErrorCode::NonIncreasingTimestamps, "encounter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const bool on = rec.status[i] != 0;
      if (on && !onset[i]) onset[i] = rec.t;
      if (!on && previous[i]) {
        if (policy == IrreversibilityPolicy::Strict) {
          throw Error(ErrorCode::IrreversibilityViolation,
                      "marker " + std::to_string(i) + " returns to 0 at t=" + std::to_string(rec.t));
        }
        if (diagnostics) ++diagnostics->reversals;
      }
      previous[i] = previous[i] || on;
    }
  }
  return onset;
}

struct TDHyperedge {
  const Trajectory* trajectory = nullptr;
  std::vector<Onset> entries;  // per position; nullopt beyond the frontier
  std::size_t frontier = 0;    // k0: number of observed leading positions

  std::size_t size() const { return entries.size(); }
};

struct TDHypergraph {
  const ProgressionHypergraph* base = nullptr;  // non-owning
  std::vector<TDHyperedge> hyperedges;
  double as_of = 0.0;
  std::size_t out_of_order_events = 0;
};

/// Restricts onsets to time t along every trajectory. Position i keeps its
/// onset only while every earlier position is observed by t and timestamps
/// stay nondecreasing (the longest observed prefix). Onsets by t that fall
/// outside the prefix are tallied in `out_of_order_events`.
inline TDHypergraph td_snapshot(const ProgressionHypergraph& hg, const OnsetMap& onsets, double t) {
  if (onsets.size() != hg.num_markers()) {
    throw Error(ErrorCode::DimensionMismatch, "onset map size does not match marker count");
  }
  if (!(t >= 0.0)) throw Error(ErrorCode::ConfigInvalid, "snapshot time must be nonnegative");
  TDHypergraph td;
  td.base = &hg;
  td.as_of = t;
  td.hyperedges.reserve(hg.num_trajectories());
  for (const auto& traj : hg.trajectories()) {
    TDHyperedge e;
    e.trajectory = &traj;
    e.entries.assign(traj.size(), std::nullopt);
    double last = -1.0;
    bool open = true;
    for (std::size_t p = 0; p < traj.size(); ++p) {
      const Onset& on = onsets[traj.markers[p]];
      const bool seen = observed_by(on, t);
      if (open && seen && *on >= last) {
        e.entries[p] = on;
        last = *on;
        e.frontier = p + 1;
      } else {
        open = false;
        if (seen) ++td.out_of_order_events;
      }
    }
    td.hyperedges.push_back(std::move(e));
  }
  return td;
}

/// Positions (0-based, into the trajectory) of the past and potential sets.
struct FrontierSplit {
  std::vector<std::size_t> past;
  std::size_t frontier = 0;
  std::vector<std::size_t> potential;
};

inline FrontierSplit split_frontier(const TDHyperedge& e) {
  FrontierSplit s;
  s.frontier = e.frontier;
  for (std::size_t p = 0; p < e.size(); ++p) (p < e.frontier ? s.past : s.potential).push_back(p);
  return s;
}

}  // namespace tdhnode
