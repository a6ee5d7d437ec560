#pragma once

// Selection-study metrics (agreement, correction factor, ground-truth recall),
// analytical inference cost estimates, and the synthetic saliency corpus used
// for desk-scale studies.
//
// Ground-truth recall is a stand-in for benchmark accuracy. It says nothing
// about absolute accuracy numbers of any real model.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdrop/fuser.h"
#include "cdrop/saliency.h"
#include "cdrop/tensor_io.h"

namespace cdrop {

// ---------------------------------------------------------------------------
// Agreement and correction factor

// |i_s ∩ i_t| / k.
double agreement(std::span<const std::size_t> i_s, std::span<const std::size_t> i_t, std::size_t k);
// |i_s \ i_t| / k. Always 1 - agreement for sets of size k.
double disagreement(std::span<const std::size_t> i_s, std::span<const std::size_t> i_t, std::size_t k);

// Depth into the teacher ranking needed to find floor(r k) tokens outside
// the student's kept top (k - floor(r k)), plus the normalized score
// (k - depth) / (k - floor(r k)). depth is 0 when no swap is requested.
struct Correction {
  std::size_t depth = 0;
  double factor = 0.0;
};
Correction correction(const RawSaliency& student, const RawSaliency& teacher, std::size_t k, double r);
double correction_factor(const RawSaliency& student, const RawSaliency& teacher, std::size_t k, double r);

// ---------------------------------------------------------------------------
// Cost model

struct CostModel {
  std::string name;
  int64_t n_layers = 0;
  int64_t n_kv_heads = 0;
  int64_t head_dim = 0;
  int64_t bytes_per_elem = 0;
  int64_t hidden = 0;
  int64_t ffn = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const CostModel& m);
void from_json(const nlohmann::json& j, CostModel& m);

// Bundled presets: llava7b, llava13b.
CostModel cost_preset(std::string_view name);
std::vector<std::string> cost_preset_names();

// 2 * L * H * s * D * B / 2^20.
double kv_cache_mb(const CostModel& m, int64_t seq_len);

// Rough dense prefill estimate L * (4 s d^2 + 2 s^2 d + 6 s d m) in TFLOPs.
double flops_estimate(const CostModel& m, int64_t seq_len);

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
  std::size_t n = 576;
  // Ground truth is lognormal: g_j ∝ exp(gt_sigma * z_j).
  double gt_sigma = 1.0;
  double noise_vision = 0.5;
  double noise_cross = 0.5;
  // Fraction of ground-truth mass visible to exactly one modality, split
  // evenly between the two.
  double complementarity = 0.3;
  uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct SynthSample {
  SaliencyDistribution ground_truth;
  RawSaliency vision;
  RawSaliency cross;
  std::vector<char> vision_only;  // token j's mass hidden from the cross signal
  std::vector<char> cross_only;   // token j's mass hidden from the vision signal
};

SynthSample generate_synth(const SynthSpec& spec);

// `count` samples with seeds derived from spec.seed.
std::vector<SynthSample> generate_corpus(const SynthSpec& spec, std::size_t count);

// A structurally valid random TensorDump (softmax attention rows, random
// features/keys/tokens, SCAP Q/K or a precomputed block).
struct SyntheticDumpSpec {
  SampleMeta meta;
  bool precomputed_block = false;
  uint64_t seed = 0;
};
TensorDump synthetic_dump(const SyntheticDumpSpec& spec);

// Meta with a square grid and small hidden sizes; n_visual must be a
// perfect square.
SampleMeta toy_meta(int64_t n_visual, int64_t n_text = 4, int64_t n_sys = 2);

// ---------------------------------------------------------------------------
// Recovery study

struct StudyRecord {
  std::string sample_id;
  std::size_t k = 0;
  double agreement = 0.0;
  double disagreement = 0.0;
  std::optional<double> correction_factor;  // absent when r == 1
  std::size_t correction_depth = 0;
  double recovery_rate = 0.0;
  Modality student = Modality::kVision;
  // Ground-truth mass covered by each method's top-k; absent without ground truth.
  std::optional<double> recall_vision;
  std::optional<double> recall_cross;
  std::optional<double> recall_recovery;
  std::optional<double> recall_convex;
};

void to_json(nlohmann::json& j, const StudyRecord& r);

struct StudyItem {
  std::string id;
  RawSaliency vision;
  RawSaliency cross;
  std::optional<std::vector<double>> ground_truth;
};

struct StudySummary {
  std::size_t samples = 0;
  std::size_t k = 0;
  double recovery_rate = 0.0;
  Modality student = Modality::kVision;
  double mean_agreement = 0.0;
  std::optional<double> mean_correction_factor;
  std::optional<double> recall_vision;
  std::optional<double> recall_cross;
  std::optional<double> recall_recovery;
  std::optional<double> recall_convex;
};

void to_json(nlohmann::json& j, const StudySummary& s);

struct StudyResult {
  std::vector<StudyRecord> records;
  StudySummary summary;
};

// Ground-truth mass of `indices` over total ground-truth mass.
double recall(std::span<const double> ground_truth, std::span<const std::size_t> indices);

StudyRecord study_sample(const StudyItem& item, std::size_t k, double r, Modality student,
                         const FuserConfig& convex);

// Runs every item (optionally on `workers` threads; results do not depend on
// the worker count) and averages.
StudyResult study_recovery(std::span<const StudyItem> corpus, std::size_t k, double r, Modality student,
                           const FuserConfig& convex = {}, std::size_t workers = 1);

std::vector<StudyItem> to_study_items(const std::vector<SynthSample>& samples);

}  // namespace cdrop
