#include "cdrop/pipeline.h"

#include <chrono>
#include <cmath>
#include <utility>

namespace cdrop {

void PipelineConfig::validate() const {
  fuser.validate();
  if (budget < 1) throw ValidationError("budget must be at least 1");
  if (merge_count >= 0 && static_cast<std::size_t>(merge_count) >= budget) {
    throw ValidationError("merge_count must be below budget");
  }
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ValidationError("epsilon must be positive");
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = nlohmann::json{{"budget", c.budget},
                     {"fuser", c.fuser},
                     {"vision_mode", to_string(c.vision_mode)},
                     {"cross_strategy", to_string(c.cross_strategy)},
                     {"epsilon", c.epsilon},
                     {"fps_seed", to_string(c.fps_seed)},
                     {"report_vector_limit", c.report_vector_limit}};
  if (c.merge_count < 0) {
    j["merge_count"] = "auto";
  } else {
    j["merge_count"] = c.merge_count;
  }
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (j.contains("budget")) j.at("budget").get_to(c.budget);
  if (j.contains("fuser")) j.at("fuser").get_to(c.fuser);
  if (j.contains("vision_mode")) c.vision_mode = parse_vision_mode(j.at("vision_mode").get<std::string>());
  if (j.contains("cross_strategy")) {
    c.cross_strategy = parse_cross_strategy(j.at("cross_strategy").get<std::string>());
  }
  if (j.contains("merge_count")) {
    const auto& m = j.at("merge_count");
    if (m.is_string()) {
      if (m.get<std::string>() != "auto") throw ValidationError("merge_count must be \"auto\" or an integer");
      c.merge_count = -1;
    } else {
      c.merge_count = m.get<long long>();
      if (c.merge_count < 0) throw ValidationError("merge_count must be non-negative");
    }
  }
  if (j.contains("epsilon")) j.at("epsilon").get_to(c.epsilon);
  if (j.contains("fps_seed")) c.fps_seed = parse_seed_rule(j.at("fps_seed").get<std::string>());
  if (j.contains("report_vector_limit")) j.at("report_vector_limit").get_to(c.report_vector_limit);
}

nlohmann::json SelectionReport::to_json(bool include_timings) const {
  nlohmann::json j{{"n_visual", n_visual}, {"K", keep},         {"M", merge},
                   {"top", top},           {"anchors", anchors}, {"cluster_sizes", cluster_sizes},
                   {"config", config}};
  j["fused"] = fused ? nlohmann::json(*fused) : nlohmann::json(nullptr);
  j["vision_saliency"] = vision_saliency ? nlohmann::json(*vision_saliency) : nlohmann::json(nullptr);
  j["cross_saliency"] = cross_saliency ? nlohmann::json(*cross_saliency) : nlohmann::json(nullptr);
  if (include_timings) j["timings_ms"] = timings_ms;
  return j;
}

PipelineError::PipelineError(const std::string& stage, const Error& cause)
    : Error(cause.kind(), stage + ": " + cause.what()), stage_(stage) {}

namespace {

class StageTimer {
 public:
  StageTimer(SelectionReport& report, std::string stage)
      : report_(report), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    const auto elapsed = std::chrono::steady_clock::now() - start_;
    report_.timings_ms[stage_] = std::chrono::duration<double, std::milli>(elapsed).count();
  }

 private:
  SelectionReport& report_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

template <typename F>
auto run_stage(SelectionReport& report, const std::string& stage, F&& fn) {
  StageTimer timer(report, stage);
  try {
    return fn();
  } catch (const PipelineError&) {
    throw;
  } catch (const Error& e) {
    throw PipelineError(stage, e);
  } catch (const nlohmann::json::exception& e) {
    throw PipelineError(stage, ValidationError(e.what()));
  }
}

}  // namespace

PipelineResult consensus_drop(const TensorDump& dump, const PipelineConfig& cfg) {
  PipelineResult result;
  SelectionReport& report = result.report;

  run_stage(report, "config", [&] {
    cfg.validate();
    const auto report_dump = validate_dump(dump);
    if (!report_dump.empty()) {
      const auto& v = report_dump.front();
      throw ValidationError("invalid dump: " + v.message +
                            (v.tensor.empty() ? "" : " [tensor '" + v.tensor + "']"));
    }
    if (cfg.budget > static_cast<std::size_t>(dump.meta.n_visual)) {
      throw ValidationError("budget " + std::to_string(cfg.budget) + " exceeds n_visual " +
                            std::to_string(dump.meta.n_visual));
    }
    return 0;
  });
  const auto n = static_cast<std::size_t>(dump.meta.n_visual);
  const BudgetSplit split = split_budget(cfg.budget, cfg.merge_count);
  report.n_visual = n;
  report.keep = split.keep;
  report.merge = split.merge;
  report.config = cfg;

  const RawSaliency s_v =
      run_stage(report, "vision_saliency", [&] { return vision_saliency(dump, cfg.vision_mode); });
  const RawSaliency s_c = run_stage(report, "cross_saliency", [&] {
    return cross_saliency(dump, cfg.cross_strategy, cfg.epsilon);
  });

  std::vector<double> seed_scores;
  const Selection selection = run_stage(report, "fuser", [&] {
    if (cfg.fuser.strategy == FuseStrategy::kConvex) {
      const auto v = temperature_normalize(s_v, cfg.fuser.tau_v);
      const auto c = temperature_normalize(s_c, cfg.fuser.tau_c);
      Selection sel = top_k(convex_fuse(v, c, cfg.fuser.alpha), split.keep);
      seed_scores = sel.fused->values;
      return sel;
    }
    const bool vision_student = cfg.fuser.student == Modality::kVision;
    const RawSaliency& student = vision_student ? s_v : s_c;
    const RawSaliency& teacher = vision_student ? s_c : s_v;
    seed_scores = student.values;
    return recovery_fuse(student, teacher, split.keep, cfg.fuser.recovery_rate);
  });

  EgtmResult merged = run_stage(report, "egtm", [&] {
    return egtm(dump, selection, split.merge, seed_scores, cfg.fps_seed);
  });

  if (n <= cfg.report_vector_limit) {
    report.vision_saliency = s_v.values;
    report.cross_saliency = s_c.values;
    if (selection.fused) report.fused = selection.fused->values;
  }
  report.top = selection.top;
  report.anchors = merged.anchors.anchors;
  for (const auto& p : merged.sequence.provenance) {
    if (p.kind == Provenance::Kind::kMerged) report.cluster_sizes.push_back(p.members.size());
  }
  result.sequence = std::move(merged.sequence);
  return result;
}

}  // namespace cdrop
