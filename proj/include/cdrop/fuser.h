#pragma once

// Saliency normalization, fusion and ranking.
//
// Ranking everywhere is by descending score with ties broken by ascending
// index, so selections are reproducible across platforms.

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cdrop/saliency.h"

namespace cdrop {

struct SaliencyDistribution {
  std::vector<double> values;
  double temperature = 1.0;

  std::size_t size() const { return values.size(); }
};

enum class FuseStrategy { kConvex, kRecovery };

std::string_view to_string(FuseStrategy s);
FuseStrategy parse_fuse_strategy(std::string_view s);

struct FuserConfig {
  FuseStrategy strategy = FuseStrategy::kConvex;
  double alpha = 0.7;
  double tau_v = 1.0;
  double tau_c = 1.0;
  Modality student = Modality::kVision;
  double recovery_rate = 0.1;

  // Throws ValidationError when a field is out of range.
  void validate() const;
};

void to_json(nlohmann::json& j, const FuserConfig& c);
// Missing keys keep their defaults.
void from_json(const nlohmann::json& j, FuserConfig& c);

struct Selection {
  std::vector<std::size_t> top;      // ranked order
  std::vector<std::size_t> non_top;  // ascending
  std::optional<SaliencyDistribution> fused;  // convex strategy only
};

// Indices sorted by descending score, ties by ascending index.
std::vector<std::size_t> rank_descending(std::span<const double> scores);

// out_j = s_j^(1/tau) / sum_k s_k^(1/tau). 0^(1/tau) is 0; an all-zero input
// stays all-zero.
SaliencyDistribution temperature_normalize(const RawSaliency& s, double tau);

// alpha * v + (1 - alpha) * c.
SaliencyDistribution convex_fuse(const SaliencyDistribution& v, const SaliencyDistribution& c,
                                 double alpha);

Selection top_k(std::span<const double> scores, std::size_t k);
Selection top_k(const SaliencyDistribution& s, std::size_t k);

// floor(r * k), guarded against r*k landing a hair under an integer.
std::size_t recovery_swap_count(double r, std::size_t k);

// Keeps the student's top (k - m) and fills the remaining m = floor(r k)
// slots with the highest-ranked teacher tokens not already kept. The whole
// teacher ranking is scanned, so |top| == k always.
Selection recovery_fuse(const RawSaliency& student, const RawSaliency& teacher, std::size_t k,
                        double r);

}  // namespace cdrop
