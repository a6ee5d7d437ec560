#pragma once

// End-to-end consensus compression of one sample: vision saliency and SCAP
// cross saliency, temperature normalization, fusion, top-K selection, then
// encoder-guided merging of the rest into M tokens.

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdrop/egtm.h"
#include "cdrop/fuser.h"
#include "cdrop/saliency.h"
#include "cdrop/tensor_io.h"

namespace cdrop {

struct PipelineConfig {
  std::size_t budget = 128;
  FuserConfig fuser;
  VisionMode vision_mode = VisionMode::kClass;
  CrossStrategy cross_strategy = CrossStrategy::kAll;
  long long merge_count = -1;  // < 0 means auto
  double epsilon = kDefaultNormEpsilon;
  SeedRule fps_seed = SeedRule::kSaliency;
  // Stage vectors longer than this are left out of the report.
  std::size_t report_vector_limit = 10000;

  void validate() const;
};

// JSON keys: budget, fuser{...}, vision_mode, cross_strategy,
// merge_count ("auto" or integer), epsilon, fps_seed, report_vector_limit.
// Missing keys keep defaults.
void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

struct SelectionReport {
  std::size_t n_visual = 0;
  std::size_t keep = 0;   // K
  std::size_t merge = 0;  // M
  std::optional<std::vector<double>> vision_saliency;
  std::optional<std::vector<double>> cross_saliency;
  std::optional<std::vector<double>> fused;
  std::vector<std::size_t> top;
  std::vector<std::size_t> anchors;
  std::vector<std::size_t> cluster_sizes;
  std::map<std::string, double> timings_ms;
  nlohmann::json config;

  // Without timings, for determinism checks.
  nlohmann::json to_json(bool include_timings = true) const;
};

struct PipelineResult {
  CompressedSequence sequence;
  SelectionReport report;
};

// Stage failures are rethrown as PipelineError carrying the stage name.
class PipelineError : public Error {
 public:
  PipelineError(const std::string& stage, const Error& cause);

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

PipelineResult consensus_drop(const TensorDump& dump, const PipelineConfig& cfg);

}  // namespace cdrop
