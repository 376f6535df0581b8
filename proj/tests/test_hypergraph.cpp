#include <gtest/gtest.h>

#include <filesystem>

#include "fixtures.hpp"

using namespace tdhnode;
using namespace tdhnode::testing;

TEST(ProgressionHypergraph, DiabetesPathways) {
  const ProgressionHypergraph hg = diabetes_pathways().build();
  EXPECT_EQ(hg.num_markers(), 21u);
  EXPECT_EQ(hg.num_trajectories(), 10u);
  const auto h = binary_incidence<double>(hg);
  const std::vector<double> expected{5, 2, 4, 2, 2, 4, 2, 5, 3, 2};
  for (std::size_t j = 0; j < expected.size(); ++j) EXPECT_EQ(h.col(j).sum(), expected[j]) << "trajectory " << j;
}

TEST(ProgressionHypergraph, IncidenceMatchesMembershipsExhaustively) {
  const ProgressionHypergraph hg = diabetes_pathways().build();
  const auto h = binary_incidence<double>(hg);
  for (std::size_t i = 0; i < hg.num_markers(); ++i)
    for (std::size_t j = 0; j < hg.num_trajectories(); ++j) {
      const auto& m = hg.trajectory(j).markers;
      const bool member = std::find(m.begin(), m.end(), i) != m.end();
      EXPECT_EQ(h(i, j), member ? 1.0 : 0.0);
    }
}

TEST(ProgressionHypergraph, CardiovascularPathways) {
  const ProgressionHypergraph hg = cardiovascular_pathways().build();
  EXPECT_EQ(hg.num_markers(), 5u);
  EXPECT_EQ(hg.num_trajectories(), 3u);
}

TEST(ProgressionHypergraph, MinimalAndCycle) {
  const auto hg = build_progression_hypergraph({{"A", "B"}});
  EXPECT_EQ(hg.num_markers(), 2u);
  EXPECT_EQ(hg.num_trajectories(), 1u);
  EXPECT_EQ(binary_incidence<double>(hg), (Eigen::MatrixXd(2, 1) << 1, 1).finished());
  EXPECT_EQ(code_of([] { build_progression_hypergraph({{"A", "B"}, {"B", "A"}}); }), ErrorCode::CycleDetected);
  EXPECT_EQ(code_of([] { build_progression_hypergraph({{"A", "B", "C"}, {"C", "D"}, {"D", "A"}}); }),
            ErrorCode::CycleDetected);
}

TEST(ProgressionHypergraph, InvalidDefinitions) {
  EXPECT_EQ(code_of([] { build_progression_hypergraph({{"A", "B", "A"}}); }), ErrorCode::DuplicateMarkerInTrajectory);
  EXPECT_EQ(code_of([] { build_progression_hypergraph({{"A", "X"}}, {"A", "B"}); }), ErrorCode::UnknownMarkerName);
  EXPECT_EQ(code_of([] { build_progression_hypergraph({{"A"}}); }), ErrorCode::ConfigInvalid);
}

TEST(ProgressionHypergraph, TopologicalOrderRespectsEdges) {
  const ProgressionHypergraph hg = diabetes_pathways().build();
  std::vector<std::size_t> pos(hg.num_markers());
  const auto& order = hg.topological_order();
  ASSERT_EQ(order.size(), hg.num_markers());
  for (std::size_t k = 0; k < order.size(); ++k) pos[order[k]] = k;
  for (const auto& t : hg.trajectories())
    for (std::size_t p = 0; p + 1 < t.size(); ++p) EXPECT_LT(pos[t.markers[p]], pos[t.markers[p + 1]]);
}

TEST(ProgressionHypergraph, TwoPathIncidence) {
  const auto h = binary_incidence<double>(two_path_hypergraph());
  Eigen::MatrixXd expected(5, 2);
  expected << 1, 1, 1, 0, 1, 0, 0, 1, 0, 1;
  EXPECT_EQ(h, expected);
}

TEST(ProgressionHypergraph, FingerprintTracksDefinition) {
  const auto a = two_path_hypergraph();
  const auto b = two_path_hypergraph();
  const auto c = build_progression_hypergraph({{"HP", "AF", "HF"}, {"HP", "S", "CD"}}, {"HP", "AF", "HF", "CD", "S"});
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NE(a.fingerprint(), c.fingerprint());
}

TEST(PathwayFiles, RoundTripAndBuiltins) {
  const auto path = std::filesystem::temp_directory_path() / "tdhnode_pathways_test.json";
  save_pathways(diabetes_pathways(), path.string());
  const PathwaySet loaded = load_pathways(path.string());
  EXPECT_EQ(loaded.build().fingerprint(), diabetes_pathways().build().fingerprint());
  EXPECT_EQ(load_pathways("builtin:cardiovascular").build().fingerprint(),
            cardiovascular_pathways().build().fingerprint());
  std::filesystem::remove(path);
}

TEST(OnsetMap, TwoPathStatuses) {
  const auto recs = two_path_statuses();
  const OnsetMap on = onset_map_from_sequence(recs, 5);
  EXPECT_EQ(on[0], 0.0);  // HP
  EXPECT_EQ(on[3], 1.0);  // CD
  EXPECT_EQ(on[1], 2.0);  // AF
  EXPECT_EQ(on[4], 3.0);  // S
  EXPECT_FALSE(on[2].has_value());  // HF
}

TEST(OnsetMap, AllZeroAndReversal) {
  std::vector<StatusRecord> zero{{0.0, {0, 0}}, {1.0, {0, 0}}};
  for (const auto& o : onset_map_from_sequence(zero, 2)) EXPECT_FALSE(o.has_value());

  std::vector<StatusRecord> flip{{0.0, {0}}, {2.0, {1}}, {3.0, {0}}};
  EXPECT_EQ(code_of([&] { onset_map_from_sequence(flip, 1, IrreversibilityPolicy::Strict); }),
            ErrorCode::IrreversibilityViolation);
  OnsetDiagnostics diag;
  const OnsetMap on = onset_map_from_sequence(flip, 1, IrreversibilityPolicy::Lenient, &diag);
  EXPECT_EQ(on[0], 2.0);
  EXPECT_EQ(diag.reversals, 1u);
}

TEST(OnsetMap, RejectsBadInput) {
  std::vector<StatusRecord> back{{1.0, {0}}, {1.0, {1}}};
  EXPECT_EQ(code_of([&] { onset_map_from_sequence(back, 1); }), ErrorCode::NonIncreasingTimestamps);
  std::vector<StatusRecord> width{{0.0, {0, 1}}};
  EXPECT_EQ(code_of([&] { onset_map_from_sequence(width, 3); }), ErrorCode::DimensionMismatch);
}

TEST(OnsetMap, IdempotentUnderQuietAppends) {
  auto recs = two_path_statuses();
  const OnsetMap before = onset_map_from_sequence(recs, 5);
  recs.push_back({7.0, recs.back().status});
  recs.push_back({9.5, recs.back().status});
  EXPECT_EQ(onset_map_from_sequence(recs, 5), before);
}

TEST(TDSnapshot, TwoPathAtLastEncounter) {
  const auto hg = two_path_hypergraph();
  const auto recs = two_path_statuses();
  const TDHypergraph td = td_snapshot(hg, onset_map_from_sequence(recs, 5), 4.0);
  ASSERT_EQ(td.hyperedges.size(), 2u);
  const auto& e1 = td.hyperedges[0];
  EXPECT_EQ(e1.frontier, 2u);
  EXPECT_EQ(e1.entries[0], 0.0);
  EXPECT_EQ(e1.entries[1], 2.0);
  EXPECT_FALSE(e1.entries[2].has_value());
  const auto& e2 = td.hyperedges[1];
  EXPECT_EQ(e2.frontier, 3u);
  EXPECT_EQ(e2.entries[0], 0.0);
  EXPECT_EQ(e2.entries[1], 1.0);
  EXPECT_EQ(e2.entries[2], 3.0);

  const FrontierSplit s1 = split_frontier(e1);
  EXPECT_EQ(s1.past, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(s1.frontier, 2u);
  EXPECT_EQ(s1.potential, (std::vector<std::size_t>{2}));
  EXPECT_TRUE(split_frontier(e2).potential.empty());
}

TEST(TDSnapshot, BeforeAnyOnset) {
  const auto hg = two_path_hypergraph();
  OnsetMap on{5.0, 6.0, std::nullopt, 7.0, 8.0};
  const TDHypergraph td = td_snapshot(hg, on, 1.0);
  for (const auto& e : td.hyperedges) {
    EXPECT_EQ(e.frontier, 0u);
    for (const auto& x : e.entries) EXPECT_FALSE(x.has_value());
    const FrontierSplit s = split_frontier(e);
    EXPECT_TRUE(s.past.empty());
    EXPECT_EQ(s.potential.size(), e.size());
  }
}

TEST(TDSnapshot, OutOfOrderOnsetStaysPotential) {
  const auto hg = build_progression_hypergraph({{"A", "B", "C"}});
  OnsetMap on{std::nullopt, 5.0, std::nullopt};
  const TDHypergraph td = td_snapshot(hg, on, 10.0);
  EXPECT_EQ(td.hyperedges[0].frontier, 0u);
  EXPECT_EQ(td.out_of_order_events, 1u);
}

TEST(TDSnapshot, PrefixInvariantsAndMonotoneFrontier) {
  const ProgressionHypergraph hg = diabetes_pathways().build();
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 60.0);
  std::bernoulli_distribution seen(0.6);
  for (int trial = 0; trial < 200; ++trial) {
    OnsetMap on(hg.num_markers());
    for (auto& o : on)
      if (seen(rng)) o = u(rng);
    std::vector<std::size_t> prev(hg.num_trajectories(), 0);
    for (double t : {0.0, 5.0, 12.5, 30.0, 45.0, 60.0}) {
      const TDHypergraph td = td_snapshot(hg, on, t);
      for (std::size_t j = 0; j < td.hyperedges.size(); ++j) {
        const auto& e = td.hyperedges[j];
        double last = -1.0;
        for (std::size_t p = 0; p < e.size(); ++p) {
          if (p < e.frontier) {
            ASSERT_TRUE(e.entries[p].has_value());
            EXPECT_LE(*e.entries[p], t);
            EXPECT_GE(*e.entries[p], last);
            last = *e.entries[p];
          } else {
            EXPECT_FALSE(e.entries[p].has_value());
          }
        }
        EXPECT_GE(e.frontier, prev[j]);
        prev[j] = e.frontier;
      }
    }
  }
}
