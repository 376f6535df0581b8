#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "fixtures.hpp"

using namespace tdhnode;
using namespace tdhnode::testing;
using M = Matrix<double>;

namespace {

ConfusionCounts counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  ConfusionCounts c;
  c.tp = tp;
  c.fp = fp;
  c.fn = fn;
  c.tn = tn;
  return c;
}

TrainConfig quick_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.max_epochs = 2;
  cfg.seed = seed;
  cfg.model = small_config(0, 0, 8, 2);
  return cfg;
}

Dataset quick_dataset(std::size_t patients, const TrainConfig& cfg) {
  const GeneratorConfig g = toy_generator(patients, 21);
  return prepare_dataset(generate_cohort(g), g.pathways, {}, cfg);
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Metrics, WorkedConfusionCounts) {
  const MetricsReport r = MetricsReport::from_counts(counts(3, 7, 1, 89));
  EXPECT_DOUBLE_EQ(r.precision, 0.3);
  EXPECT_DOUBLE_EQ(r.recall, 0.75);
  EXPECT_NEAR(r.f1, 2.0 * 0.3 * 0.75 / 1.05, 1e-15);
  EXPECT_NEAR(r.f1, 0.428571, 1e-6);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.92);
}

TEST(Metrics, PerfectAndConstantPredictors) {
  const MetricsReport perfect = MetricsReport::from_counts(counts(5, 0, 0, 20));
  EXPECT_EQ(perfect.precision, 1.0);
  EXPECT_EQ(perfect.recall, 1.0);
  EXPECT_EQ(perfect.f1, 1.0);
  EXPECT_EQ(perfect.accuracy, 1.0);
  // Predicting 0 everywhere: zero denominators are reported as 0.
  const MetricsReport zeros = MetricsReport::from_counts(counts(0, 0, 5, 20));
  EXPECT_EQ(zeros.precision, 0.0);
  EXPECT_EQ(zeros.recall, 0.0);
  EXPECT_EQ(zeros.f1, 0.0);
  EXPECT_DOUBLE_EQ(zeros.accuracy, 0.8);
}

TEST(Metrics, EmptySetRaises) {
  EXPECT_EQ(code_of([] { MetricsReport::from_counts({}); }), ErrorCode::EmptyEvaluationSet);
}

TEST(Metrics, CountsFromAddMatchTally) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution coin(0.4);
  ConfusionCounts c;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (int i = 0; i < 500; ++i) {
    const bool p = coin(rng), a = coin(rng);
    c.add(p, a);
    tp += p && a;
    fp += p && !a;
    fn += !p && a;
    tn += !p && !a;
  }
  EXPECT_EQ(c.tp, tp);
  EXPECT_EQ(c.fp, fp);
  EXPECT_EQ(c.fn, fn);
  EXPECT_EQ(c.tn, tn);
}

TEST(Evaluate, ThresholdBoundariesAndOrder) {
  TrainConfig cfg = quick_config(1);
  const Dataset d = quick_dataset(20, cfg);
  cfg.model.n_markers = d.hg.num_markers();
  cfg.model.n_risk = d.data.schema.width();
  const Model<float> model(cfg.model, d.hg, 3);
  auto seqs = d.data.sequences;

  const MetricsReport all_positive = evaluate(model, seqs, 0.0);
  EXPECT_EQ(all_positive.recall, 1.0);
  EXPECT_EQ(all_positive.counts.fn + all_positive.counts.tn, 0u);

  const MetricsReport a = evaluate(model, seqs, 0.5);
  std::reverse(seqs.begin(), seqs.end());
  std::swap(seqs[0], seqs[3]);
  const MetricsReport b = evaluate(model, seqs, 0.5);
  EXPECT_EQ(a.counts.tp, b.counts.tp);
  EXPECT_EQ(a.counts.fp, b.counts.fp);
  EXPECT_EQ(a.counts.fn, b.counts.fn);
  EXPECT_EQ(a.counts.tn, b.counts.tn);

  std::size_t evaluated = 0;
  for (const auto& s : seqs) evaluated += onset_labels(s, d.hg.num_markers()).evaluated();
  EXPECT_EQ(a.counts.total(), evaluated);
}

TEST(Ablation, GridParsing) {
  const auto specs = parse_ablation_grid("full,-H,-W,none");
  ASSERT_EQ(specs.size(), 4u);
  EXPECT_TRUE(specs[0].adaptive_incidence && specs[0].learnable_weights);
  EXPECT_TRUE(!specs[1].adaptive_incidence && specs[1].learnable_weights);
  EXPECT_TRUE(specs[2].adaptive_incidence && !specs[2].learnable_weights);
  EXPECT_TRUE(!specs[3].adaptive_incidence && !specs[3].learnable_weights);
  EXPECT_EQ(code_of([] { parse_ablation_grid("full,bogus"); }), ErrorCode::ConfigInvalid);
  EXPECT_EQ(code_of([] { parse_ablation_grid(""); }), ErrorCode::ConfigInvalid);
}

TEST(Ablation, StaticVariantUsesBinaryNormalizedLaplacian) {
  const auto hg = two_path_hypergraph();
  ModelConfig cfg = small_config(5, 3);
  cfg.adaptive_incidence = false;
  cfg.learnable_weights = false;
  const Model<double> model(cfg, hg, 4);
  const auto seq = two_path_sequence();

  const M h = binary_incidence<double>(hg);
  const Eigen::VectorXd dv = h.rowwise().sum(), de = h.colwise().sum().transpose();
  const M dv_is = dv.cwiseSqrt().cwiseInverse().asDiagonal();
  const M oracle = M::Identity(5, 5) - dv_is * h * de.cwiseInverse().asDiagonal() * h.transpose() * dv_is;
  for (std::size_t k = 0; k < seq.valid_length; ++k)
    EXPECT_LE((model.laplacian_at(seq, k).laplacian - oracle).cwiseAbs().maxCoeff(), 1e-10) << k;
}

TEST(Ablation, RunsEveryVariantAndWritesCsv) {
  const TrainConfig cfg = quick_config(2);
  const Dataset d = quick_dataset(20, cfg);
  const auto rows = ablate(d, cfg, parse_ablation_grid("full,none"));
  ASSERT_EQ(rows.size(), 2u);
  const auto csv = lines(ablation_csv(rows));
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0].rfind("variant,", 0), 0u);
  EXPECT_EQ(csv[1].rfind("full,1,1,", 0), 0u);
  EXPECT_EQ(csv[2].rfind("none,0,0,", 0), 0u);
}

TEST(Sweep, SingletonMatchesDirectRun) {
  const TrainConfig cfg = quick_config(5);
  const Dataset d = quick_dataset(20, cfg);
  const auto rows = sweep(d, cfg, "ode_steps", {4});
  TrainConfig direct = cfg;
  direct.model.rk4_steps = 4;
  const RunResult r = train_and_evaluate(d, direct);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].report.counts.tp, r.test.counts.tp);
  EXPECT_EQ(rows[0].report.counts.fp, r.test.counts.fp);
  EXPECT_EQ(rows[0].report.recall, r.test.recall);
  EXPECT_EQ(rows[0].report.f1, r.test.f1);
}

TEST(Sweep, CsvRowsAndAxisValidation) {
  TrainConfig cfg = quick_config(5);
  cfg.max_epochs = 1;
  const Dataset d = quick_dataset(12, cfg);
  const auto rows = sweep(d, cfg, "embedding_dim", {4, 8});
  const auto csv = lines(sweep_csv("embedding_dim", rows));
  ASSERT_EQ(csv.size(), 3u);
  EXPECT_EQ(csv[0], "embedding_dim,recall,f1");
  EXPECT_EQ(csv[1].rfind("4,", 0), 0u);
  EXPECT_EQ(csv[2].rfind("8,", 0), 0u);
  EXPECT_EQ(code_of([&] { sweep(d, cfg, "heads", {2}); }), ErrorCode::ConfigInvalid);
  EXPECT_EQ(code_of([&] { sweep(d, cfg, "ode_steps", {0}); }), ErrorCode::ConfigInvalid);
}

TEST(Embeddings, ShapeAndIdenticalPatients) {
  const auto hg = two_path_hypergraph();
  const Model<double> model(small_config(5, 3, 8), hg, 7);
  PatientSequence a = two_path_sequence(), b = two_path_sequence();
  b.patient_id = "copy";
  PatientSequence c = two_path_sequence();
  c.patient_id = "other";
  c.encounters[0].x[0] += 0.5;
  const M emb = patient_embeddings(model, {a, b, c});
  EXPECT_EQ(emb.rows(), 3);
  EXPECT_EQ(emb.cols(), 8);
  EXPECT_EQ(emb.row(0), emb.row(1));
  EXPECT_GT((emb.row(0) - emb.row(2)).norm(), 1e-9);
  EXPECT_LE((emb.row(0) - model.final_state(a).colwise().mean()).cwiseAbs().maxCoeff(), 1e-15);

  const auto csv = lines(export_embeddings_csv(model, {a, b, c}));
  ASSERT_EQ(csv.size(), 4u);
  EXPECT_EQ(std::count(csv[0].begin(), csv[0].end(), ','), 8);
  EXPECT_EQ(csv[2].rfind("copy,", 0), 0u);
}

TEST(Embeddings, SeparabilityOnKnownPoints) {
  M emb(4, 2);
  emb << 0, 0, 0, 2, 10, 0, 10, 2;
  const Separability s = cluster_separability(emb, {0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(s.between, 10.0);
  EXPECT_DOUBLE_EQ(s.within, 2.0);
  EXPECT_EQ(code_of([&] { cluster_separability(emb, {0, 0, 0, 0}); }), ErrorCode::EmptyEvaluationSet);
}

TEST(Inspect, AttentionAndMatricesAtEncounter) {
  const auto hg = two_path_hypergraph();
  const Model<double> model(small_config(5, 3, 8), hg, 8);
  const auto seq = two_path_sequence();
  const nlohmann::json j = inspect_json(model, seq, 2);
  EXPECT_EQ(j.at("patient_id"), "demo");
  EXPECT_EQ(j.at("markers").size(), 5u);

  // At t2 the second pathway HP -> CD -> S has HP and CD observed.
  const auto& second = j.at("attention").at(1);
  EXPECT_EQ(second.at("frontier").get<std::size_t>(), 2u);
  double past = 0.0, potential = 0.0;
  for (const auto& w : second.at("weights"))
    (w.at("set") == "past" ? past : potential) += w.at("alpha").get<double>();
  EXPECT_NEAR(past, 1.0, 1e-9);
  EXPECT_NEAR(potential, 1.0, 1e-9);

  const M binary = binary_incidence<double>(hg);
  const auto& inc = j.at("incidence");
  for (Eigen::Index i = 0; i < 5; ++i)
    for (Eigen::Index e = 0; e < 2; ++e)
      EXPECT_EQ(inc.at(i).at(e).get<double>() != 0.0, binary(i, e) != 0.0) << i << "," << e;
  const auto& w = j.at("edge_weights");
  EXPECT_DOUBLE_EQ(w.at(0).at(1).get<double>(), w.at(1).at(0).get<double>());
  EXPECT_EQ(code_of([&] { inspect_json(model, seq, 99); }), ErrorCode::IndexOutOfRange);
}
