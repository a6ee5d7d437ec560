#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "cdrop/analysis.h"
#include "cdrop/saliency.h"
#include "oracles/oracles.h"
#include "toy_dump.h"

namespace cdrop {
namespace {

TensorDump attention_only_dump(int64_t heads, int64_t n, std::vector<float> attn) {
  TensorDump d;
  d.meta = {.n_visual = n, .n_text = 1, .n_sys = 0, .grid_h = 1, .grid_w = n, .d_llm = 1,
            .d_enc = 1, .d_key = 1, .heads_llm = 1, .heads_enc = heads, .head_dim_llm = 1};
  d.put({names::kEncAttn, {heads, n + 1, n + 1}, std::move(attn)});
  return d;
}

Tensor qk_tensor(const char* name, int64_t heads, int64_t s, int64_t dh, std::vector<float> v) {
  return {name, {heads, s, dh}, std::move(v)};
}

TEST(VisionSaliency, ClassModeSingleHead) {
  // Only the CLS row matters in class mode.
  std::vector<float> a = {0, 0.2f, 0.3f, 0.5f, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  const auto s = vision_saliency(attention_only_dump(1, 3, a), VisionMode::kClass);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s.values[0], static_cast<double>(0.2f));
  EXPECT_EQ(s.values[1], static_cast<double>(0.3f));
  EXPECT_EQ(s.values[2], static_cast<double>(0.5f));
  EXPECT_EQ(s.modality, Modality::kVision);
}

TEST(VisionSaliency, ClassModeAveragesHeads) {
  std::vector<float> a(2 * 16, 0.0f);
  a[1] = 1;       // head 0, CLS -> patch 0
  a[16 + 2] = 1;  // head 1, CLS -> patch 1
  const auto s = vision_saliency(attention_only_dump(2, 3, a), VisionMode::kClass);
  EXPECT_EQ(s.values, (std::vector<double>{0.5, 0.5, 0.0}));
}

TEST(VisionSaliency, TokensModeColumnMeansWithoutClsRow) {
  const std::vector<float> a = {0.1f, 0.2f, 0.3f, 0.4f, 0.25f, 0.25f, 0.25f, 0.25f,
                                0.1f, 0.6f, 0.2f, 0.1f, 0.0f,  0.5f,  0.0f,  0.5f};
  const auto s = vision_saliency(attention_only_dump(1, 3, a), VisionMode::kTokens);
  // toy_oracle.py: [0.45, 0.15, 0.28333...]
  EXPECT_NEAR(s.values[0], 0.45, 1e-7);
  EXPECT_NEAR(s.values[1], 0.15, 1e-7);
  EXPECT_NEAR(s.values[2], 0.2833333333333333, 1e-7);
}

TEST(VisionSaliency, MissingOrMisshapenTensor) {
  TensorDump d = testing::toy_dump();
  d.tensors.erase(names::kEncAttn);
  EXPECT_THROW(vision_saliency(d, VisionMode::kClass), ValidationError);
  d = testing::toy_dump();
  d.meta.n_visual = 5;
  EXPECT_THROW(vision_saliency(d, VisionMode::kTokens), ValidationError);
}

TEST(CausalAttention, SingleToken) {
  const auto a = causal_head_attention(qk_tensor("q", 1, 1, 2, {0.3f, -1}), qk_tensor("k", 1, 1, 2, {2, 5}));
  EXPECT_EQ(a(0, 0), 1.0f);
}

TEST(CausalAttention, ZeroInputsGiveUniformCausalRows) {
  const auto a = causal_head_attention(qk_tensor("q", 1, 2, 3, std::vector<float>(6, 0)),
                                       qk_tensor("k", 1, 2, 3, std::vector<float>(6, 0)));
  EXPECT_EQ(a(0, 0), 1.0f);
  EXPECT_EQ(a(0, 1), 0.0f);
  EXPECT_EQ(a(1, 0), 0.5f);
  EXPECT_EQ(a(1, 1), 0.5f);
}

TEST(CausalAttention, HandCaseThreeTokens) {
  const auto a = causal_head_attention(qk_tensor("q", 1, 3, 1, {1, 2, -1}), qk_tensor("k", 1, 3, 1, {0.5f, -1, 2}));
  // toy_oracle.py
  EXPECT_NEAR(a(1, 0), 0.9525741268224334, 1e-7);
  EXPECT_NEAR(a(1, 1), 0.04742587317756679, 1e-7);
  EXPECT_NEAR(a(2, 0), 0.1752903921400367, 1e-7);
  EXPECT_NEAR(a(2, 1), 0.7855970345892759, 1e-7);
  EXPECT_NEAR(a(2, 2), 0.03911257327068746, 1e-7);
  EXPECT_EQ(a(0, 1), 0.0f);
  EXPECT_EQ(a(1, 2), 0.0f);
}

TEST(CausalAttention, RejectsMismatchAndNonFinite) {
  EXPECT_THROW(causal_head_attention(qk_tensor("q", 1, 2, 1, {1, 2}), qk_tensor("k", 1, 3, 1, {1, 2, 3})),
               ValidationError);
  EXPECT_THROW(causal_head_attention(qk_tensor("q", 1, 1, 1, {NAN}), qk_tensor("k", 1, 1, 1, {1})),
               ValidationError);
}

TEST(CausalAttention, LargeLogitsDoNotOverflow) {
  const auto a = causal_head_attention(qk_tensor("q", 1, 2, 1, {1e4f, 1e4f}), qk_tensor("k", 1, 2, 1, {1e4f, -1e4f}));
  EXPECT_EQ(a(1, 0), 1.0f);
  EXPECT_EQ(a(1, 1), 0.0f);
}

TEST(CausalAttention, MatchesLongDoubleOracleAndRowsSumToOne) {
  std::mt19937 rng(11);
  std::normal_distribution<float> normal(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const int64_t heads = 1 + trial % 3, s = 1 + trial % 9, dh = 1 + trial % 4;
    std::vector<float> qv(heads * s * dh), kv(heads * s * dh);
    for (auto& v : qv) v = normal(rng);
    for (auto& v : kv) v = normal(rng);
    const auto a = causal_head_attention(qk_tensor("q", heads, s, dh, qv), qk_tensor("k", heads, s, dh, kv));

    std::vector<std::vector<std::vector<double>>> q3(heads), k3(heads);
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t i = 0; i < s; ++i) {
        q3[h].emplace_back(qv.begin() + (h * s + i) * dh, qv.begin() + (h * s + i + 1) * dh);
        k3[h].emplace_back(kv.begin() + (h * s + i) * dh, kv.begin() + (h * s + i + 1) * dh);
      }
    }
    const auto ref = oracle::causal_attention(q3, k3);
    for (int64_t i = 0; i < s; ++i) {
      double sum = 0;
      for (int64_t j = 0; j < s; ++j) {
        EXPECT_NEAR(a(i, j), ref[i][j], 1e-6);
        if (j > i) EXPECT_EQ(a(i, j), 0.0f);
        sum += a(i, j);
      }
      EXPECT_NEAR(sum, 1.0, 1e-5);
    }
  }
}

TEST(TextToVision, IndexArithmetic) {
  SampleMeta m{.n_visual = 1, .n_text = 1, .n_sys = 0};
  MatrixF attn(2, 2, std::vector<float>{1, 0, 0.25f, 0.75f});
  const auto b = extract_text_to_vision(attn, m);
  ASSERT_EQ(b.rows(), 1u);
  ASSERT_EQ(b.cols(), 1u);
  EXPECT_EQ(b.values(0, 0), 0.25f);
}

TEST(TextToVision, SixTokenSubmatrix) {
  SampleMeta m{.n_visual = 3, .n_text = 2, .n_sys = 1};
  MatrixF attn(6, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) attn(i, j) = static_cast<float>(10 * i + j);
  const auto b = extract_text_to_vision(attn, m);
  EXPECT_EQ(b.values, MatrixF(2, 3, std::vector<float>{41, 42, 43, 51, 52, 53}));
  EXPECT_THROW(extract_text_to_vision(MatrixF(5, 5), m), ValidationError);
}

TEST(TextToVision, RowOnlyPathEqualsFullMatrixPath) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    const TensorDump d = synthetic_dump({toy_meta(9, 3, 2), false, seed});
    const auto full = extract_text_to_vision(causal_head_attention(d.get(names::kScapQ), d.get(names::kScapK)), d.meta);
    const auto rows = text_to_vision_attention(d.get(names::kScapQ), d.get(names::kScapK), d.meta);
    EXPECT_EQ(full.values, rows.values);
  }
}

AttentionBlock worked_block() { return {MatrixF(2, 3, std::vector<float>{0.2f, 0.3f, 0.5f, 0.5f, 0.3f, 0.2f})}; }

TEST(AggregateCross, AllTokens) {
  const auto s = aggregate_cross(worked_block(), CrossStrategy::kAll);
  EXPECT_NEAR(s.values[0], 0.35, 1e-6);
  EXPECT_NEAR(s.values[1], 0.30, 1e-6);
  EXPECT_NEAR(s.values[2], 0.35, 1e-6);
}

TEST(AggregateCross, LastToken) {
  const auto s = aggregate_cross(worked_block(), CrossStrategy::kLast);
  EXPECT_NEAR(s.values[0], 0.5, 1e-6);
  EXPECT_NEAR(s.values[1], 0.3, 1e-6);
  EXPECT_NEAR(s.values[2], 0.2, 1e-6);
}

TEST(AggregateCross, MaxToken) {
  const auto s = aggregate_cross(worked_block(), CrossStrategy::kMax);
  EXPECT_NEAR(s.values[0], 0.5 / 1.3, 1e-6);
  EXPECT_NEAR(s.values[1], 0.3 / 1.3, 1e-6);
  EXPECT_NEAR(s.values[2], 0.5 / 1.3, 1e-6);
}

TEST(AggregateCross, ZeroRowContributesNothing) {
  const AttentionBlock b{MatrixF(2, 2, std::vector<float>{0, 0, 0.25f, 0.75f})};
  const auto s = aggregate_cross(b, CrossStrategy::kAll);
  EXPECT_NEAR(s.values[0], 0.125, 1e-8);
  EXPECT_NEAR(s.values[1], 0.375, 1e-8);
  const AttentionBlock zero{MatrixF(1, 3, 0.0f)};
  EXPECT_EQ(aggregate_cross(zero, CrossStrategy::kLast).values, (std::vector<double>{0, 0, 0}));
}

TEST(AggregateCross, RejectsEmptyAndNegative) {
  EXPECT_THROW(aggregate_cross(AttentionBlock{MatrixF(0, 3)}, CrossStrategy::kAll), ValidationError);
  EXPECT_THROW(aggregate_cross(AttentionBlock{MatrixF(1, 2, std::vector<float>{-0.1f, 1})}, CrossStrategy::kAll),
               ValidationError);
}

TEST(AggregateCross, AllStrategySumsToOne) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<float> u(0.01f, 1.0f);
  for (int trial = 0; trial < 50; ++trial) {
    MatrixF m(1 + trial % 5, 2 + trial % 11);
    for (auto& v : m.data()) v = u(rng);
    const auto s = aggregate_cross({m}, CrossStrategy::kAll);
    EXPECT_NEAR(std::accumulate(s.values.begin(), s.values.end(), 0.0), 1.0, 1e-5);
  }
}

TEST(CrossSaliency, PrecomputedBlockTakesPrecedence) {
  TensorDump d = testing::toy_dump();
  Tensor block{names::kScapAttnBlock, {2, 6}, {1, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0}};
  d.put(block);
  const auto s = cross_saliency(d, CrossStrategy::kAll);
  EXPECT_NEAR(s.values[0], 1.0, 1e-7);
  EXPECT_EQ(s.values[1], 0.0);
}

TEST(CrossSaliency, ToyDumpMatchesOracle) {
  const auto s = cross_saliency(testing::toy_dump(), CrossStrategy::kAll);
  const double expected[] = {0.13019503707227537, 0.21812522296507214, 0.19141603237161786,
                             0.14465543069231204, 0.14722278476795775, 0.1683854772294187};
  for (int j = 0; j < 6; ++j) EXPECT_NEAR(s.values[j], expected[j], 1e-6);
}

// Permuting patch columns permutes every saliency output the same way.
TEST(SaliencyProperties, PermutationEquivariance) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t n = 9;
    const TensorDump d = synthetic_dump({toy_meta(n, 3, 1), true, static_cast<uint64_t>(trial)});
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    // Permuted dump: patch p of the new dump is patch perm[p] of the old one.
    TensorDump pd = d;
    const auto& a = d.get(names::kEncAttn).data;
    auto& pa = pd.tensors.at(names::kEncAttn).data;
    const std::size_t side = n + 1;
    auto src = [&](std::size_t i) { return i == 0 ? 0 : perm[i - 1] + 1; };
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < side; ++i)
        for (std::size_t j = 0; j < side; ++j) pa[h * side * side + i * side + j] = a[h * side * side + src(i) * side + src(j)];
    const auto& b = d.get(names::kScapAttnBlock).data;
    auto& pb = pd.tensors.at(names::kScapAttnBlock).data;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t p = 0; p < static_cast<std::size_t>(n); ++p) pb[i * n + p] = b[i * n + perm[p]];

    for (auto mode : {VisionMode::kClass, VisionMode::kTokens}) {
      const auto s = vision_saliency(d, mode);
      const auto ps = vision_saliency(pd, mode);
      for (int64_t p = 0; p < n; ++p) EXPECT_NEAR(ps.values[p], s.values[perm[p]], 1e-12);
    }
    for (auto strat : {CrossStrategy::kAll, CrossStrategy::kLast, CrossStrategy::kMax}) {
      const auto s = cross_saliency(d, strat);
      const auto ps = cross_saliency(pd, strat);
      for (int64_t p = 0; p < n; ++p) EXPECT_NEAR(ps.values[p], s.values[perm[p]], 1e-12);
    }
  }
}

}  // namespace
}  // namespace cdrop
