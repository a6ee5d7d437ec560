#pragma once

// Encoder-guided token merging.
//
// The non-selected tokens are compressed into M merged tokens:
//   1. farthest point sampling over l2-normalized encoder features picks M
//      anchors from the non-selected set,
//   2. every remaining non-selected token is hard-assigned to the anchor with
//      the largest dot product in head-averaged, normalized encoder key space,
//   3. each anchor's cluster is averaged in projector space.
// Structure comes from the encoder; the averaged rows live in LLM space.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdrop/fuser.h"
#include "cdrop/tensor.h"
#include "cdrop/tensor_io.h"

namespace cdrop {

inline constexpr double kFeatureNormEpsilon = 1e-8;

struct AnchorSet {
  std::vector<std::size_t> anchors;  // global token indices, selection order
};

// Parallel arrays over the non-anchor members, in non_top order.
struct Assignment {
  std::vector<std::size_t> members;
  std::vector<std::size_t> anchor_of;
};

struct Provenance {
  enum class Kind { kRetained, kMerged };
  Kind kind = Kind::kRetained;
  std::size_t source = 0;            // retained token, or the anchor
  std::vector<std::size_t> members;  // merged only: anchor first, then assigned tokens ascending
};

struct CompressedSequence {
  MatrixF tokens;  // (K + M) x d_llm
  std::vector<Provenance> provenance;
};

void to_json(nlohmann::json& j, const Provenance& p);

// Rows scaled by 1 / (||v|| + epsilon), in double.
MatrixD l2_normalize_rows(const MatrixF& m, double epsilon = kFeatureNormEpsilon);

// Farthest point sampling. `features` rows correspond one-to-one with
// `row_to_global`. Starts from `seed_row`; every later pick maximizes the
// minimum squared Euclidean distance to the anchors chosen so far, ties to
// the lower row. Rows are l2-normalized first.
AnchorSet fps(const MatrixF& features, std::span<const std::size_t> row_to_global, std::size_t m,
              std::size_t seed_row, double epsilon = kFeatureNormEpsilon);

// keys is heads x N x d_k. Row j of the result is the head-mean key of token
// j scaled to unit norm, or zero when the mean is zero.
MatrixD head_avg_keys(const Tensor& keys);

// Each non-anchor token in non_top goes to the anchor with the largest
// <g_u, g_a>; ties go to the anchor earlier in AnchorSet order.
Assignment assign(const MatrixD& g, std::span<const std::size_t> non_top, const AnchorSet& anchors);

// Retained rows copied in selection order, then one mean row per anchor in
// anchor order.
CompressedSequence merge(const MatrixF& proj_tokens, const Selection& selection,
                         const AnchorSet& anchors, const Assignment& assignment);

// Splits a total budget into (K retained, M merged). `merge_count < 0` means
// auto: M = round(B * 20 / 128) clamped to [1, B - 1] (M = 0 when B == 1).
struct BudgetSplit {
  std::size_t keep = 0;
  std::size_t merge = 0;
};
BudgetSplit split_budget(std::size_t budget, long long merge_count);

enum class SeedRule { kSaliency, kLowestIndex };
std::string_view to_string(SeedRule r);
SeedRule parse_seed_rule(std::string_view s);

// Runs fps -> assign -> merge for a finished selection. `seed_scores` ranks
// candidate FPS seeds (highest wins, ties to the lower index) under
// SeedRule::kSaliency.
struct EgtmResult {
  CompressedSequence sequence;
  AnchorSet anchors;
  Assignment assignment;
};
EgtmResult egtm(const TensorDump& dump, const Selection& selection, std::size_t merge_count,
                std::span<const double> seed_scores, SeedRule seed_rule);

// CDT1 container holding `compressed_tokens` and provenance attachments.
Container compressed_to_container(const CompressedSequence& seq, const SampleMeta& meta);
CompressedSequence compressed_from_container(const Container& c);

}  // namespace cdrop
