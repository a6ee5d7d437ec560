#include "cdrop/fuser.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cdrop {

std::string_view to_string(FuseStrategy s) {
  return s == FuseStrategy::kConvex ? "convex" : "recovery";
}

FuseStrategy parse_fuse_strategy(std::string_view s) {
  if (s == "convex") return FuseStrategy::kConvex;
  if (s == "recovery") return FuseStrategy::kRecovery;
  throw ValidationError("unknown fuser strategy '" + std::string(s) + "' (convex|recovery)");
}

void FuserConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  if (!(tau_v > 0.0) || !std::isfinite(tau_v)) throw ValidationError("tau_v must be positive");
  if (!(tau_c > 0.0) || !std::isfinite(tau_c)) throw ValidationError("tau_c must be positive");
  if (!(recovery_rate >= 0.0 && recovery_rate <= 1.0)) {
    throw ValidationError("recovery_rate must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const FuserConfig& c) {
  j = nlohmann::json{{"strategy", to_string(c.strategy)}, {"alpha", c.alpha},
                     {"tau_v", c.tau_v},                   {"tau_c", c.tau_c},
                     {"student", to_string(c.student)},    {"recovery_rate", c.recovery_rate}};
}

void from_json(const nlohmann::json& j, FuserConfig& c) {
  if (j.contains("strategy")) c.strategy = parse_fuse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
  if (j.contains("tau_v")) j.at("tau_v").get_to(c.tau_v);
  if (j.contains("tau_c")) j.at("tau_c").get_to(c.tau_c);
  if (j.contains("student")) c.student = parse_modality(j.at("student").get<std::string>());
  if (j.contains("recovery_rate")) j.at("recovery_rate").get_to(c.recovery_rate);
}

std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  return order;
}

SaliencyDistribution temperature_normalize(const RawSaliency& s, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("temperature must be positive");
  double max_value = 0.0;
  for (double v : s.values) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError("saliency entries must be finite and non-negative");
    }
    max_value = std::max(max_value, v);
  }
  SaliencyDistribution out{std::vector<double>(s.size(), 0.0), tau};
  if (max_value == 0.0) return out;

  // (s_j / max)^(1/tau) keeps small temperatures from overflowing; the
  // common factor cancels in the normalization.
  const double inv_tau = 1.0 / tau;
  double sum = 0.0;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (s.values[j] > 0.0) {
      out.values[j] = std::pow(s.values[j] / max_value, inv_tau);
      sum += out.values[j];
    }
  }
  for (double& v : out.values) v /= sum;
  return out;
}

SaliencyDistribution convex_fuse(const SaliencyDistribution& v, const SaliencyDistribution& c,
                                 double alpha) {
  if (v.size() != c.size()) {
    throw ValidationError("cannot fuse saliency of lengths " + std::to_string(v.size()) + " and " +
                          std::to_string(c.size()));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("alpha must lie in [0, 1]");
  SaliencyDistribution out{std::vector<double>(v.size()), 1.0};
  const double beta = 1.0 - alpha;
  for (std::size_t j = 0; j < v.size(); ++j) out.values[j] = alpha * v.values[j] + beta * c.values[j];
  return out;
}

Selection top_k(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size()) {
    throw ValidationError("k = " + std::to_string(k) + " outside [1, " + std::to_string(scores.size()) + "]");
  }
  auto order = rank_descending(scores);
  Selection sel;
  sel.top.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  sel.non_top.assign(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(sel.non_top.begin(), sel.non_top.end());
  return sel;
}

Selection top_k(const SaliencyDistribution& s, std::size_t k) {
  Selection sel = top_k(std::span<const double>(s.values), k);
  sel.fused = s;
  return sel;
}

std::size_t recovery_swap_count(double r, std::size_t k) {
  if (!(r >= 0.0 && r <= 1.0)) throw ValidationError("recovery rate must lie in [0, 1]");
  return std::min(k, static_cast<std::size_t>(std::floor(r * static_cast<double>(k) + 1e-9)));
}

Selection recovery_fuse(const RawSaliency& student, const RawSaliency& teacher, std::size_t k,
                        double r) {
  const std::size_t n = student.size();
  if (teacher.size() != n) throw ValidationError("student and teacher saliency lengths differ");
  if (k < 1 || k > n) {
    throw ValidationError("k = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  const std::size_t swaps = recovery_swap_count(r, k);
  const auto student_rank = rank_descending(student.values);
  const auto teacher_rank = rank_descending(teacher.values);

  std::vector<char> taken(n, 0);
  Selection sel;
  sel.top.reserve(k);
  for (std::size_t i = 0; i < k - swaps; ++i) {
    sel.top.push_back(student_rank[i]);
    taken[student_rank[i]] = 1;
  }
  for (std::size_t idx : teacher_rank) {
    if (sel.top.size() == k) break;
    if (!taken[idx]) {
      sel.top.push_back(idx);
      taken[idx] = 1;
    }
  }
  for (std::size_t j = 0; j < n; ++j) {
    if (!taken[j]) sel.non_top.push_back(j);
  }
  return sel;
}

}  // namespace cdrop
