#include "cdrop/saliency.h"

#include <algorithm>
#include <cmath>

namespace cdrop {

std::string_view to_string(Modality m) { return m == Modality::kVision ? "vision" : "cross"; }

std::string_view to_string(VisionMode m) { return m == VisionMode::kClass ? "class" : "tokens"; }

std::string_view to_string(CrossStrategy s) {
  switch (s) {
    case CrossStrategy::kAll: return "all";
    case CrossStrategy::kLast: return "last";
    case CrossStrategy::kMax: return "max";
  }
  return "all";
}

Modality parse_modality(std::string_view s) {
  if (s == "vision") return Modality::kVision;
  if (s == "cross") return Modality::kCross;
  throw ValidationError("unknown modality '" + std::string(s) + "' (vision|cross)");
}

VisionMode parse_vision_mode(std::string_view s) {
  if (s == "class") return VisionMode::kClass;
  if (s == "tokens") return VisionMode::kTokens;
  throw ValidationError("unknown vision mode '" + std::string(s) + "' (class|tokens)");
}

CrossStrategy parse_cross_strategy(std::string_view s) {
  if (s == "all") return CrossStrategy::kAll;
  if (s == "last") return CrossStrategy::kLast;
  if (s == "max") return CrossStrategy::kMax;
  throw ValidationError("unknown cross strategy '" + std::string(s) + "' (all|last|max)");
}

RawSaliency vision_saliency(const TensorDump& dump, VisionMode mode) {
  const Tensor& attn = dump.get(names::kEncAttn);
  const int64_t n = dump.meta.n_visual;
  if (attn.rank() != 3 || attn.dims[1] != n + 1 || attn.dims[2] != n + 1 || attn.numel() != attn.data.size()) {
    throw ValidationError("tensor 'enc_attn_penult' must be heads x (1+N) x (1+N)");
  }
  const auto heads = static_cast<std::size_t>(attn.dims[0]);
  const auto side = static_cast<std::size_t>(n + 1);
  const auto patches = static_cast<std::size_t>(n);

  std::vector<double> acc(patches, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const float* head = attn.data.data() + h * side * side;
    if (mode == VisionMode::kClass) {
      for (std::size_t j = 0; j < patches; ++j) acc[j] += head[j + 1];
    } else {
      for (std::size_t i = 1; i < side; ++i) {
        const float* row = head + i * side;
        for (std::size_t j = 0; j < patches; ++j) acc[j] += row[j + 1];
      }
    }
  }
  const double denom = mode == VisionMode::kClass ? static_cast<double>(heads)
                                                  : static_cast<double>(heads * patches);
  for (double& v : acc) v /= denom;
  return {std::move(acc), Modality::kVision, std::string(to_string(mode))};
}

namespace {

struct QkShape {
  std::size_t heads, seq, head_dim;
};

QkShape check_qk(const Tensor& q, const Tensor& k) {
  if (q.rank() != 3 || k.rank() != 3) throw ValidationError("scap_q/scap_k must be rank 3");
  if (q.dims != k.dims) throw ValidationError("scap_q and scap_k dims differ");
  if (q.numel() != q.data.size() || k.numel() != k.data.size()) {
    throw ValidationError("scap_q/scap_k data size does not match dims");
  }
  if (q.dims[1] < 1) throw ValidationError("SCAP sequence must be non-empty");
  auto finite = [](const Tensor& t) {
    return std::all_of(t.data.begin(), t.data.end(), [](float f) { return std::isfinite(f); });
  };
  if (!finite(q) || !finite(k)) throw ValidationError("non-finite value in scap_q/scap_k");
  return {static_cast<std::size_t>(q.dims[0]), static_cast<std::size_t>(q.dims[1]),
          static_cast<std::size_t>(q.dims[2])};
}

// Accumulates the head-mean causal softmax for query rows [row_begin, row_end)
// into `out` (rows relative to row_begin, `seq` columns).
void accumulate_causal_rows(const Tensor& q, const Tensor& k, const QkShape& shape,
                            std::size_t row_begin, std::size_t row_end, MatrixD& out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
  std::vector<double> logits(shape.seq);
  for (std::size_t h = 0; h < shape.heads; ++h) {
    const float* qh = q.data.data() + h * shape.seq * shape.head_dim;
    const float* kh = k.data.data() + h * shape.seq * shape.head_dim;
    for (std::size_t i = row_begin; i < row_end; ++i) {
      const float* qi = qh + i * shape.head_dim;
      double max_logit = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        const float* kj = kh + j * shape.head_dim;
        double dot = 0.0;
        for (std::size_t d = 0; d < shape.head_dim; ++d) dot += static_cast<double>(qi[d]) * kj[d];
        logits[j] = dot * scale;
        max_logit = std::max(max_logit, logits[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        logits[j] = std::exp(logits[j] - max_logit);
        sum += logits[j];
      }
      auto row = out.row(i - row_begin);
      for (std::size_t j = 0; j <= i; ++j) row[j] += logits[j] / sum;
    }
  }
  for (double& v : out.data()) v /= static_cast<double>(shape.heads);
}

MatrixF to_float(const MatrixD& m) {
  MatrixF out(m.rows(), m.cols());
  std::transform(m.data().begin(), m.data().end(), out.data().begin(),
                 [](double v) { return static_cast<float>(v); });
  return out;
}

}  // namespace

MatrixF causal_head_attention(const Tensor& q, const Tensor& k) {
  const QkShape shape = check_qk(q, k);
  MatrixD acc(shape.seq, shape.seq, 0.0);
  accumulate_causal_rows(q, k, shape, 0, shape.seq, acc);
  return to_float(acc);
}

AttentionBlock text_to_vision_attention(const Tensor& q, const Tensor& k, const SampleMeta& meta) {
  const QkShape shape = check_qk(q, k);
  if (static_cast<int64_t>(shape.seq) != meta.seq_len()) {
    throw ValidationError("SCAP sequence length " + std::to_string(shape.seq) +
                          " != n_sys + n_visual + n_text = " + std::to_string(meta.seq_len()));
  }
  const auto text_begin = static_cast<std::size_t>(meta.n_sys + meta.n_visual);
  MatrixD rows(shape.seq - text_begin, shape.seq, 0.0);
  accumulate_causal_rows(q, k, shape, text_begin, shape.seq, rows);

  const auto n = static_cast<std::size_t>(meta.n_visual);
  const auto sys = static_cast<std::size_t>(meta.n_sys);
  MatrixF block(rows.rows(), n);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    for (std::size_t j = 0; j < n; ++j) block(i, j) = static_cast<float>(rows(i, sys + j));
  }
  return {std::move(block)};
}

AttentionBlock extract_text_to_vision(const MatrixF& attn, const SampleMeta& meta) {
  const int64_t s = meta.seq_len();
  if (attn.rows() != static_cast<std::size_t>(s) || attn.cols() != static_cast<std::size_t>(s)) {
    throw ValidationError("attention is " + std::to_string(attn.rows()) + "x" +
                          std::to_string(attn.cols()) + " but n_sys + n_visual + n_text = " +
                          std::to_string(s));
  }
  const auto sys = static_cast<std::size_t>(meta.n_sys);
  const auto n = static_cast<std::size_t>(meta.n_visual);
  const auto l = static_cast<std::size_t>(meta.n_text);
  MatrixF block(l, n);
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < n; ++j) block(i, j) = attn(sys + n + i, sys + j);
  }
  return {std::move(block)};
}

namespace {

void normalize_into(std::span<const double> z, double epsilon, std::span<double> out) {
  double sum = 0.0;
  for (double v : z) sum += v;
  for (std::size_t j = 0; j < z.size(); ++j) out[j] = z[j] / (sum + epsilon);
}

}  // namespace

RawSaliency aggregate_cross(const AttentionBlock& a, CrossStrategy strategy, double epsilon) {
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  if (rows == 0 || cols == 0) throw ValidationError("empty text-to-vision attention block");
  for (float v : a.values.data()) {
    if (!(v >= 0.0f) || !std::isfinite(v)) {
      throw ValidationError("attention block entries must be finite and non-negative");
    }
  }

  std::vector<double> out(cols, 0.0);
  std::vector<double> z(cols);
  std::vector<double> normed(cols);
  auto load_row = [&](std::size_t i) {
    auto r = a.values.row(i);
    std::copy(r.begin(), r.end(), z.begin());
  };

  switch (strategy) {
    case CrossStrategy::kAll:
      for (std::size_t i = 0; i < rows; ++i) {
        load_row(i);
        normalize_into(z, epsilon, normed);
        for (std::size_t j = 0; j < cols; ++j) out[j] += normed[j];
      }
      for (double& v : out) v /= static_cast<double>(rows);
      break;
    case CrossStrategy::kLast:
      load_row(rows - 1);
      normalize_into(z, epsilon, out);
      break;
    case CrossStrategy::kMax:
      std::fill(z.begin(), z.end(), 0.0);
      for (std::size_t i = 0; i < rows; ++i) {
        auto r = a.values.row(i);
        for (std::size_t j = 0; j < cols; ++j) z[j] = std::max(z[j], static_cast<double>(r[j]));
      }
      normalize_into(z, epsilon, out);
      break;
  }
  return {std::move(out), Modality::kCross, std::string(to_string(strategy))};
}

RawSaliency cross_saliency(const TensorDump& dump, CrossStrategy strategy, double epsilon) {
  if (dump.has(names::kScapAttnBlock)) {
    AttentionBlock block{to_matrix(dump.get(names::kScapAttnBlock))};
    if (block.rows() != static_cast<std::size_t>(dump.meta.n_text) ||
        block.cols() != static_cast<std::size_t>(dump.meta.n_visual)) {
      throw ValidationError("tensor 'scap_attn_block' must be n_text x n_visual");
    }
    return aggregate_cross(block, strategy, epsilon);
  }
  const AttentionBlock block =
      text_to_vision_attention(dump.get(names::kScapQ), dump.get(names::kScapK), dump.meta);
  return aggregate_cross(block, strategy, epsilon);
}

}  // namespace cdrop
