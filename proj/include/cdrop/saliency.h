#pragma once

// Raw saliency extraction: vision-side scores from the encoder's penultimate
// self-attention, and cross-modal scores from the static cross-attention
// probe (SCAP) over the full multimodal sequence.

#include <string>
#include <string_view>
#include <vector>

#include "cdrop/tensor.h"
#include "cdrop/tensor_io.h"

namespace cdrop {

enum class Modality { kVision, kCross };
enum class VisionMode { kClass, kTokens };
enum class CrossStrategy { kAll, kLast, kMax };

std::string_view to_string(Modality m);
std::string_view to_string(VisionMode m);
std::string_view to_string(CrossStrategy s);
Modality parse_modality(std::string_view s);
VisionMode parse_vision_mode(std::string_view s);
CrossStrategy parse_cross_strategy(std::string_view s);

inline constexpr double kDefaultNormEpsilon = 1e-8;

struct RawSaliency {
  std::vector<double> values;
  Modality modality = Modality::kVision;
  std::string mode;

  std::size_t size() const { return values.size(); }
};

// Text-to-vision attention block, n_text x N.
struct AttentionBlock {
  MatrixF values;

  std::size_t rows() const { return values.rows(); }
  std::size_t cols() const { return values.cols(); }
};

// class: head-mean of the CLS row over patch columns.
// tokens: head-mean over every patch query row of the attention each patch
// column receives. CLS is index 0 of both axes.
RawSaliency vision_saliency(const TensorDump& dump, VisionMode mode);

// Head-averaged causal softmax(Q K^T / sqrt(d_h)). q and k are
// heads x S x d_h. Entry (i, j) is exactly zero for j > i.
MatrixF causal_head_attention(const Tensor& q, const Tensor& k);

// Same values as extract_text_to_vision(causal_head_attention(q, k), meta)
// but only evaluates the text query rows.
AttentionBlock text_to_vision_attention(const Tensor& q, const Tensor& k, const SampleMeta& meta);

// A[i][j] = attn[n_sys + N + i][n_sys + j].
AttentionBlock extract_text_to_vision(const MatrixF& attn, const SampleMeta& meta);

// Row normalization is z / (sum(z) + epsilon); an all-zero row stays zero.
RawSaliency aggregate_cross(const AttentionBlock& a, CrossStrategy strategy,
                            double epsilon = kDefaultNormEpsilon);

// SCAP end to end on a dump. A precomputed scap_attn_block wins over
// scap_q/scap_k when both are present.
RawSaliency cross_saliency(const TensorDump& dump, CrossStrategy strategy,
                           double epsilon = kDefaultNormEpsilon);

}  // namespace cdrop
