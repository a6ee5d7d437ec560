#include <gtest/gtest.h>

#include <cstring>
#include <numeric>
#include <random>
#include <set>

#include "cdrop/analysis.h"
#include "cdrop/egtm.h"
#include "oracles/oracles.h"
#include "toy_dump.h"

namespace cdrop {
namespace {

std::vector<std::size_t> iota_vec(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<std::vector<double>> as_rows(const MatrixF& m) {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < m.rows(); ++r) out.emplace_back(m.row(r).begin(), m.row(r).end());
  return out;
}

TEST(Fps, TwoDimensionalExample) {
  const MatrixF f(3, 2, std::vector<float>{1, 0, 0, 1, 1, 0});
  const auto idx = iota_vec(3);
  EXPECT_EQ(fps(f, idx, 2, 0).anchors, (std::vector<std::size_t>{0, 1}));
}

TEST(Fps, ExhaustionSelectsEveryRowSeedFirst) {
  const MatrixF f(4, 2, std::vector<float>{1, 0, 0.9f, 0.1f, -1, 0, 0, 1});
  const std::vector<std::size_t> globals = {10, 11, 12, 13};
  const auto a = fps(f, globals, 4, 1).anchors;
  EXPECT_EQ(a.front(), 11u);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()), (std::set<std::size_t>{10, 11, 12, 13}));
  // From row 1, row 2 (opposite direction) is farthest.
  EXPECT_EQ(a[1], 12u);
}

TEST(Fps, DuplicateRowsTieToLowerRow) {
  const MatrixF f(4, 2, std::vector<float>{1, 0, 0, 1, 0, 1, 0, 1});
  EXPECT_EQ(fps(f, iota_vec(4), 2, 0).anchors, (std::vector<std::size_t>{0, 1}));
}

TEST(Fps, ZeroRowIsTolerated) {
  const MatrixF f(3, 2, std::vector<float>{0, 0, 1, 0, 0, 1});
  const auto a = fps(f, iota_vec(3), 3, 1).anchors;
  EXPECT_EQ(a, (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Fps, Errors) {
  const MatrixF f(2, 2, std::vector<float>{1, 0, 0, 1});
  EXPECT_THROW(fps(f, iota_vec(2), 3, 0), ValidationError);
  EXPECT_THROW(fps(f, iota_vec(2), 0, 0), ValidationError);
  EXPECT_THROW(fps(MatrixF(0, 2), iota_vec(0), 1, 0), ValidationError);
  EXPECT_THROW(fps(MatrixF(1, 1, std::vector<float>{NAN}), iota_vec(1), 1, 0), ValidationError);
}

TEST(Fps, MaxMinPropertyAgainstBruteForce) {
  std::mt19937 rng(17);
  std::normal_distribution<float> normal(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + trial % 64, dim = 1 + trial % 5;
    MatrixF f(rows, dim);
    for (auto& v : f.data()) v = normal(rng);
    if (trial % 3 == 0 && rows > 2) {  // duplicate rows create exact ties
      std::copy(f.row(0).begin(), f.row(0).end(), f.row(rows - 1).begin());
    }
    const std::size_t m = 1 + rng() % std::min<std::size_t>(rows, 16);
    const std::size_t seed = rng() % rows;
    const auto picks = fps(f, iota_vec(rows), m, seed).anchors;
    ASSERT_EQ(picks.size(), m);
    EXPECT_EQ(picks.front(), seed);
    EXPECT_EQ(oracle::fps_violation(as_rows(f), picks, kFeatureNormEpsilon), std::nullopt) << "trial " << trial;
  }
}

TEST(HeadAvgKeys, SingleHeadIsRowNormalized) {
  const Tensor k{"k", {1, 2, 2}, {3, 4, 0, -2}};
  const auto g = head_avg_keys(k);
  EXPECT_DOUBLE_EQ(g(0, 0), 0.6);
  EXPECT_DOUBLE_EQ(g(0, 1), 0.8);
  EXPECT_DOUBLE_EQ(g(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(g(1, 1), -1.0);
}

TEST(HeadAvgKeys, OppositeHeadsCancelToZeroRow) {
  const Tensor k{"k", {2, 1, 3}, {1, -2, 3, -1, 2, -3}};
  const auto g = head_avg_keys(k);
  EXPECT_EQ(g(0, 0), 0.0);
  EXPECT_EQ(g(0, 1), 0.0);
  EXPECT_EQ(g(0, 2), 0.0);
}

TEST(HeadAvgKeys, TwoHeadHandCase) {
  // Head means: token 0 (2, 2), token 1 (0, -1).
  const Tensor k{"k", {2, 2, 2}, {1, 0, 0, 2, 3, 4, 0, -4}};
  const auto g = head_avg_keys(k);
  EXPECT_NEAR(g(0, 0), 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(g(0, 1), 1 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(g(1, 0), 0.0, 1e-15);
  EXPECT_NEAR(g(1, 1), -1.0, 1e-15);
}

TEST(HeadAvgKeys, RandomRowsAreUnit) {
  const TensorDump d = synthetic_dump({toy_meta(16), false, 2});
  const auto g = head_avg_keys(d.get(names::kEncKeys));
  for (std::size_t r = 0; r < g.rows(); ++r) {
    double sq = 0;
    for (double v : g.row(r)) sq += v * v;
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-5);
  }
  EXPECT_THROW(head_avg_keys(Tensor{"k", {2, 3}, std::vector<float>(6)}), ValidationError);
}

TEST(Assign, SingleAnchorTakesAll) {
  const MatrixD g(4, 2, std::vector<double>{1, 0, 0, 1, -1, 0, 0, -1});
  const std::vector<std::size_t> non = {0, 1, 2, 3};
  const auto a = assign(g, non, AnchorSet{{2}});
  EXPECT_EQ(a.members, (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(a.anchor_of, (std::vector<std::size_t>{2, 2, 2}));
}

TEST(Assign, IdenticalKeyGoesToThatAnchor) {
  const MatrixD g(3, 2, std::vector<double>{1, 0, 0, 1, 0, 1});
  const std::vector<std::size_t> non = {0, 1, 2};
  const auto a = assign(g, non, AnchorSet{{0, 1}});
  EXPECT_EQ(a.anchor_of, (std::vector<std::size_t>{1}));
}

TEST(Assign, TiesGoToEarlierAnchor) {
  const MatrixD g(3, 2, std::vector<double>{1, 0, 0, 1, 0, 0});
  const std::vector<std::size_t> non = {0, 1, 2};
  EXPECT_EQ(assign(g, non, AnchorSet{{1, 0}}).anchor_of, (std::vector<std::size_t>{1}));
  EXPECT_EQ(assign(g, non, AnchorSet{{0, 1}}).anchor_of, (std::vector<std::size_t>{0}));
}

TEST(Assign, Errors) {
  const MatrixD g(3, 2, 0.0);
  const std::vector<std::size_t> non = {1, 2};
  EXPECT_THROW(assign(g, non, AnchorSet{}), ValidationError);
  EXPECT_THROW(assign(g, non, AnchorSet{{0}}), ValidationError);
}

TEST(Assign, MatchesExhaustiveArgmax) {
  std::mt19937 rng(23);
  std::normal_distribution<double> normal(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 40, dim = 3;
    MatrixD g(n, dim);
    for (std::size_t r = 0; r < n; ++r) {
      double sq = 0;
      for (auto& v : g.row(r)) sq += (v = normal(rng)) * v;
      for (auto& v : g.row(r)) v /= std::sqrt(sq);
    }
    auto non = iota_vec(n);
    std::shuffle(non.begin(), non.end(), rng);
    const std::size_t m = 1 + rng() % std::min<std::size_t>(8, n);
    const AnchorSet anchors{std::vector<std::size_t>(non.begin(), non.begin() + m)};
    std::sort(non.begin(), non.end());
    const auto a = assign(g, non, anchors);
    ASSERT_EQ(a.members.size(), n - m);
    for (std::size_t i = 0; i < a.members.size(); ++i) {
      std::size_t best = 0;
      double best_dot = -2;
      for (std::size_t k = 0; k < m; ++k) {
        double dot = 0;
        for (std::size_t c = 0; c < dim; ++c) dot += g(a.members[i], c) * g(anchors.anchors[k], c);
        if (dot > best_dot) best_dot = dot, best = k;
      }
      EXPECT_EQ(a.anchor_of[i], anchors.anchors[best]);
    }
  }
}

TEST(Merge, SingletonClustersKeepAnchorRows) {
  const MatrixF proj(4, 2, std::vector<float>{0, 1, 2, 3, 4, 5, 6, 7});
  const Selection sel{{3, 0}, {1, 2}, std::nullopt};
  const auto out = merge(proj, sel, AnchorSet{{2, 1}}, Assignment{});
  EXPECT_EQ(out.tokens, MatrixF(4, 2, std::vector<float>{6, 7, 0, 1, 4, 5, 2, 3}));
  EXPECT_EQ(out.provenance[2].kind, Provenance::Kind::kMerged);
  EXPECT_EQ(out.provenance[2].members, (std::vector<std::size_t>{2}));
}

TEST(Merge, OneClusterAbsorbsAll) {
  const MatrixF proj(5, 1, std::vector<float>{10, 1, 2, 3, 6});
  const Selection sel{{0}, {1, 2, 3, 4}, std::nullopt};
  const Assignment asg{{1, 2, 3}, {4, 4, 4}};
  const auto out = merge(proj, sel, AnchorSet{{4}}, asg);
  EXPECT_EQ(out.tokens, MatrixF(2, 1, std::vector<float>{10, 3}));
  EXPECT_EQ(out.provenance[1].members, (std::vector<std::size_t>{4, 1, 2, 3}));
}

TEST(Merge, ZeroAnchorsDropsNonSelected) {
  const MatrixF proj(3, 1, std::vector<float>{1, 2, 3});
  const auto out = merge(proj, Selection{{2}, {0, 1}, std::nullopt}, AnchorSet{}, Assignment{});
  EXPECT_EQ(out.tokens, MatrixF(1, 1, std::vector<float>{3}));
}

TEST(Merge, InconsistentDomainsRejected) {
  const MatrixF proj(4, 1, std::vector<float>{1, 2, 3, 4});
  const Selection sel{{0}, {1, 2, 3}, std::nullopt};
  EXPECT_THROW(merge(proj, sel, AnchorSet{{0}}, Assignment{}), ValidationError);                     // anchor selected
  EXPECT_THROW(merge(proj, sel, AnchorSet{{1}}, Assignment{{2}, {1}}), ValidationError);             // 3 unassigned
  EXPECT_THROW(merge(proj, sel, AnchorSet{{1}}, Assignment{{2, 3}, {1, 2}}), ValidationError);       // non-anchor target
  EXPECT_THROW(merge(proj, Selection{{0}, {1, 2}, std::nullopt}, AnchorSet{{1}}, Assignment{{2}, {1}}),
               ValidationError);  // token 3 uncovered
}

TEST(Egtm, ToyMergeCaseMatchesOracle) {
  const TensorDump d = testing::toy_dump();
  const std::vector<double> scores = {0.9, 0.1, 0.5, 0.3, 0.2, 0.4};
  const auto sel = top_k(scores, 2);
  ASSERT_EQ(sel.top, (std::vector<std::size_t>{0, 2}));
  const auto r = egtm(d, sel, 2, scores, SeedRule::kSaliency);
  EXPECT_EQ(r.anchors.anchors, (std::vector<std::size_t>{5, 4}));
  ASSERT_EQ(r.sequence.provenance.size(), 4u);
  EXPECT_EQ(r.sequence.provenance[2].members, (std::vector<std::size_t>{5, 1}));
  EXPECT_EQ(r.sequence.provenance[3].members, (std::vector<std::size_t>{4, 3}));
  // toy_oracle.py
  const float expected[] = {0.5f, 10, 2.5f, 6, 3.5f, 4, 4, 3};
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(r.sequence.tokens.data()[i], expected[i], 1e-6);
}

TEST(Egtm, LowestIndexSeedRule) {
  const TensorDump d = testing::toy_dump();
  const std::vector<double> scores = {0.9, 0.1, 0.5, 0.3, 0.2, 0.4};
  const auto r = egtm(d, top_k(scores, 2), 2, scores, SeedRule::kLowestIndex);
  EXPECT_EQ(r.anchors.anchors.front(), 1u);
  EXPECT_EQ(parse_seed_rule("lowest_index"), SeedRule::kLowestIndex);
  EXPECT_THROW(parse_seed_rule("random"), ValidationError);
}

TEST(Egtm, StructuralInvariantsOnRandomDumps) {
  std::mt19937 rng(31);
  for (int trial = 0; trial < 60; ++trial) {
    const int64_t side = 2 + trial % 6;
    const auto n = static_cast<std::size_t>(side * side);
    const TensorDump d = synthetic_dump({toy_meta(side * side), true, static_cast<uint64_t>(trial)});
    std::vector<double> scores(n);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& s : scores) s = u(rng);
    const std::size_t k = 1 + rng() % (n - 1);
    const std::size_t m = rng() % (n - k + 1);
    const auto sel = top_k(scores, k);
    const auto r = egtm(d, sel, m, scores, SeedRule::kSaliency);
    const MatrixF proj = to_matrix(d.get(names::kProjTokens));

    ASSERT_EQ(r.sequence.tokens.rows(), k + m);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_EQ(std::memcmp(r.sequence.tokens.row(i).data(), proj.row(sel.top[i]).data(), proj.cols() * 4), 0);
    }
    std::size_t covered = 0;
    std::set<std::size_t> seen;
    for (std::size_t i = k; i < k + m; ++i) {
      const auto& members = r.sequence.provenance[i].members;
      covered += members.size();
      for (std::size_t j : members) EXPECT_TRUE(seen.insert(j).second);
      for (std::size_t c = 0; c < proj.cols(); ++c) {
        double sum = 0;
        for (std::size_t j : members) sum += proj(j, c);
        EXPECT_NEAR(r.sequence.tokens(i, c) * members.size(), sum, 1e-5 * std::max(1.0, std::abs(sum)));
      }
    }
    if (m > 0) {
      EXPECT_EQ(covered, n - k);
      EXPECT_EQ(seen, std::set<std::size_t>(sel.non_top.begin(), sel.non_top.end()));
    }
  }
}

TEST(SplitBudget, AutoRatio) {
  EXPECT_EQ(split_budget(128, -1).keep, 108u);
  EXPECT_EQ(split_budget(128, -1).merge, 20u);
  EXPECT_EQ(split_budget(64, -1).merge, 10u);
  EXPECT_EQ(split_budget(2, -1).merge, 1u);
  EXPECT_EQ(split_budget(1, -1).merge, 0u);
  EXPECT_EQ(split_budget(1, -1).keep, 1u);
  EXPECT_EQ(split_budget(576, -1).merge, 90u);
}

TEST(SplitBudget, Explicit) {
  EXPECT_EQ(split_budget(10, 0).keep, 10u);
  EXPECT_EQ(split_budget(10, 9).keep, 1u);
  EXPECT_THROW(split_budget(10, 10), ValidationError);
  EXPECT_THROW(split_budget(0, -1), ValidationError);
}

TEST(CompressedContainer, RoundTrip) {
  const TensorDump d = testing::toy_dump();
  const std::vector<double> scores = {0.9, 0.1, 0.5, 0.3, 0.2, 0.4};
  const auto seq = egtm(d, top_k(scores, 2), 2, scores, SeedRule::kSaliency).sequence;
  const auto back = compressed_from_container(decode_container(encode_container(compressed_to_container(seq, d.meta))));
  EXPECT_EQ(back.tokens, seq.tokens);
  ASSERT_EQ(back.provenance.size(), seq.provenance.size());
  for (std::size_t i = 0; i < seq.provenance.size(); ++i) {
    EXPECT_EQ(back.provenance[i].kind, seq.provenance[i].kind);
    EXPECT_EQ(back.provenance[i].source, seq.provenance[i].source);
    EXPECT_EQ(back.provenance[i].members, seq.provenance[i].members);
  }
}

}  // namespace
}  // namespace cdrop
