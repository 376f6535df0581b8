#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdhnode/checkpoint.hpp"
#include "tdhnode/data.hpp"
#include "tdhnode/metrics.hpp"
#include "tdhnode/model.hpp"
#include "tdhnode/pathways.hpp"
#include "tdhnode/training.hpp"

namespace tdhnode {

/// Ingested cohort with its seeded train/val/test split.
struct Dataset {
  PathwaySet pathways;
  ProgressionHypergraph hg;
  IngestResult data;
  SplitIndices split;
  std::vector<PatientSequence> train, val, test;
};

inline Dataset prepare_dataset(const std::vector<PatientRecord>& records, const PathwaySet& pathways,
                               const std::vector<DiscretizationRule>& rules, const TrainConfig& cfg,
                               const IngestOptions& opt = {}) {
  if (records.empty()) throw Error(ErrorCode::EmptyCohort, "cohort has no patients");
  Dataset d;
  d.pathways = pathways;
  d.hg = pathways.build();
  d.data = ingest(records, d.hg, rules, opt);
  d.split = split_indices(d.data.sequences.size(), cfg.seed, cfg.train_fraction, cfg.val_fraction);
  d.train = select(d.data.sequences, d.split.train);
  d.val = select(d.data.sequences, d.split.val);
  d.test = select(d.data.sequences, d.split.test);
  return d;
}

/// Model seed derived from the run seed; the split and the trainer use the
/// run seed directly.
inline std::uint64_t model_seed_for(std::uint64_t seed) { return seed * 0x9e3779b97f4a7c15ULL + 1; }

template <class T>
MetricsReport evaluate(const Model<T>& model, const std::vector<PatientSequence>& seqs, double threshold = 0.5) {
  return MetricsReport::from_counts(evaluate_cohort(model, seqs, threshold).counts);
}

struct RunResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> history;
  MetricsReport test;
};

/// Trains one model on the dataset's train split with validation early
/// stopping and evaluates the best parameters on the test split.
inline RunResult train_and_evaluate(const Dataset& d, TrainConfig cfg,
                                    const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.model.n_markers = d.hg.num_markers();
  cfg.model.n_risk = d.data.schema.width();
  const std::uint64_t mseed = model_seed_for(cfg.seed);
  Model<float> model(cfg.model, d.hg, mseed);
  Trainer<float> trainer(model, cfg);
  trainer.run(d.train, d.val, [&](const EpochLog& log, const Trainer<float>&) {
    if (on_epoch) on_epoch(log);
  });
  RunResult r;
  r.history = trainer.history();
  r.checkpoint.train = cfg;
  r.checkpoint.pathways = d.pathways;
  r.checkpoint.schema = d.data.schema;
  r.checkpoint.model_seed = mseed;
  r.checkpoint.params = export_params(model.params());
  r.test = evaluate(model, d.test, cfg.threshold);
  return r;
}

struct AblationSpec {
  std::string name;
  bool adaptive_incidence = true;
  bool learnable_weights = true;
};

/// Grid tokens: full, -H (static incidence), -W (identity weights), none.
inline std::vector<AblationSpec> parse_ablation_grid(const std::string& grid) {
  std::vector<AblationSpec> specs;
  std::stringstream ss(grid);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok == "full") {
      specs.push_back({tok, true, true});
    } else if (tok == "-H") {
      specs.push_back({tok, false, true});
    } else if (tok == "-W") {
      specs.push_back({tok, true, false});
    } else if (tok == "none") {
      specs.push_back({tok, false, false});
    } else {
      throw Error(ErrorCode::ConfigInvalid, "unknown ablation " + tok + " (use full, -H, -W, none)");
    }
  }
  if (specs.empty()) throw Error(ErrorCode::ConfigInvalid, "empty ablation grid");
  return specs;
}

struct AblationRow {
  AblationSpec spec;
  MetricsReport report;
  int epochs = 0;
};

inline std::vector<AblationRow> ablate(const Dataset& d, const TrainConfig& base, const std::vector<AblationSpec>& specs) {
  std::vector<AblationRow> rows;
  for (const auto& s : specs) {
    TrainConfig cfg = base;
    cfg.model.adaptive_incidence = s.adaptive_incidence;
    cfg.model.learnable_weights = s.learnable_weights;
    RunResult r = train_and_evaluate(d, cfg);
    rows.push_back({s, r.test, static_cast<int>(r.history.size())});
  }
  return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << "variant,adaptive_incidence,learnable_weights,accuracy,precision,recall,f1,evaluated,epochs\n";
  for (const auto& r : rows)
    out << r.spec.name << "," << (r.spec.adaptive_incidence ? 1 : 0) << "," << (r.spec.learnable_weights ? 1 : 0)
        << "," << r.report.accuracy << "," << r.report.precision << "," << r.report.recall << "," << r.report.f1
        << "," << r.report.counts.total() << "," << r.epochs << "\n";
  return out.str();
}

struct SweepRow {
  int value = 0;
  MetricsReport report;
};

inline std::vector<SweepRow> sweep(const Dataset& d, const TrainConfig& base, const std::string& axis,
                                   const std::vector<int>& values) {
  if (axis != "embedding_dim" && axis != "ode_steps") {
    throw Error(ErrorCode::ConfigInvalid, "sweep axis must be embedding_dim or ode_steps");
  }
  std::vector<SweepRow> rows;
  for (int v : values) {
    if (v <= 0) throw Error(ErrorCode::ConfigInvalid, "sweep values must be positive");
    TrainConfig cfg = base;
    if (axis == "embedding_dim") {
      cfg.model.dim = v;
    } else {
      cfg.model.rk4_steps = v;
    }
    rows.push_back({v, train_and_evaluate(d, cfg).test});
  }
  return rows;
}

inline std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out.precision(6);
  out << axis << ",recall,f1\n";
  for (const auto& r : rows) out << r.value << "," << r.report.recall << "," << r.report.f1 << "\n";
  return out.str();
}

/// One row per patient: mean over marker rows of the final hidden state.
template <class T>
Matrix<double> patient_embeddings(const Model<T>& model, const std::vector<PatientSequence>& seqs) {
  Matrix<double> out(static_cast<Eigen::Index>(seqs.size()), model.config().dim);
  for (std::size_t p = 0; p < seqs.size(); ++p)
    out.row(static_cast<Eigen::Index>(p)) = model.final_state(seqs[p]).colwise().mean().template cast<double>();
  return out;
}

template <class T>
std::string export_embeddings_csv(const Model<T>& model, const std::vector<PatientSequence>& seqs) {
  const Matrix<double> emb = patient_embeddings(model, seqs);
  std::ostringstream out;
  out.precision(9);
  out << "patient_id";
  for (Eigen::Index c = 0; c < emb.cols(); ++c) out << ",e" << c;
  out << "\n";
  for (Eigen::Index r = 0; r < emb.rows(); ++r) {
    out << seqs[static_cast<std::size_t>(r)].patient_id;
    for (Eigen::Index c = 0; c < emb.cols(); ++c) out << "," << emb(r, c);
    out << "\n";
  }
  return out.str();
}

/// Distance between the two cluster centroids and the mean pairwise distance
/// between members of the same cluster.
struct Separability {
  double between = 0.0;
  double within = 0.0;
};

inline Separability cluster_separability(const Matrix<double>& emb, const std::vector<int>& labels) {
  Eigen::RowVectorXd c0 = Eigen::RowVectorXd::Zero(emb.cols()), c1 = c0;
  std::size_t n0 = 0, n1 = 0;
  for (Eigen::Index r = 0; r < emb.rows(); ++r) {
    if (labels[static_cast<std::size_t>(r)] == 0) {
      c0 += emb.row(r);
      ++n0;
    } else {
      c1 += emb.row(r);
      ++n1;
    }
  }
  if (n0 == 0 || n1 == 0) throw Error(ErrorCode::EmptyEvaluationSet, "both clusters need members");
  c0 /= static_cast<double>(n0);
  c1 /= static_cast<double>(n1);
  double within = 0.0;
  std::size_t pairs = 0;
  for (Eigen::Index a = 0; a < emb.rows(); ++a)
    for (Eigen::Index b = a + 1; b < emb.rows(); ++b)
      if (labels[static_cast<std::size_t>(a)] == labels[static_cast<std::size_t>(b)]) {
        within += (emb.row(a) - emb.row(b)).norm();
        ++pairs;
      }
  return {(c0 - c1).norm(), pairs ? within / static_cast<double>(pairs) : 0.0};
}

namespace detail {

template <class T>
nlohmann::json matrix_json(const Matrix<T>& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(static_cast<double>(m(r, c)));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace detail

/// H_p, W_p, degrees, L and attention weights at encounter k.
template <class T>
nlohmann::json inspect_json(const Model<T>& model, const PatientSequence& seq, std::size_t k) {
  const LaplacianBundle<T> b = model.laplacian_at(seq, k);
  const auto& hg = model.hypergraph();
  nlohmann::json att = nlohmann::json::array();
  for (std::size_t j = 0; j < b.attention.size(); ++j) {
    const auto& traj = hg.trajectory(j);
    nlohmann::json e{{"trajectory", j}, {"frontier", b.frontier[j]}};
    nlohmann::json w = nlohmann::json::array();
    for (std::size_t p = 0; p < traj.size(); ++p)
      w.push_back({{"marker", hg.marker_name(traj.markers[p])},
                   {"position", p + 1},
                   {"set", p < b.frontier[j] ? "past" : "potential"},
                   {"alpha", static_cast<double>(b.attention[j](static_cast<Eigen::Index>(p), 0))}});
    e["weights"] = w;
    att.push_back(e);
  }
  nlohmann::json markers = nlohmann::json::array();
  for (std::size_t i = 0; i < hg.num_markers(); ++i) markers.push_back(hg.marker_name(i));
  return {{"patient_id", seq.patient_id},
          {"encounter", k},
          {"as_of", b.as_of},
          {"markers", markers},
          {"incidence", detail::matrix_json(b.incidence)},
          {"edge_weights", detail::matrix_json(b.edge_weights)},
          {"node_degree", detail::matrix_json(Matrix<T>(b.node_degree.diagonal()))},
          {"edge_degree", detail::matrix_json(Matrix<T>(b.edge_degree.diagonal()))},
          {"laplacian", detail::matrix_json(b.laplacian)},
          {"attention", att}};
}

}  // namespace tdhnode
