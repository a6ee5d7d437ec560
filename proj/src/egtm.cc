#include "cdrop/egtm.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cdrop {

void to_json(nlohmann::json& j, const Provenance& p) {
  if (p.kind == Provenance::Kind::kRetained) {
    j = nlohmann::json{{"kind", "retained"}, {"source", p.source}};
  } else {
    j = nlohmann::json{{"kind", "merged"}, {"anchor", p.source}, {"members", p.members}};
  }
}

MatrixD l2_normalize_rows(const MatrixF& m, double epsilon) {
  MatrixD out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto src = m.row(r);
    double sq = 0.0;
    for (float v : src) sq += static_cast<double>(v) * v;
    const double scale = 1.0 / (std::sqrt(sq) + epsilon);
    auto dst = out.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) dst[c] = src[c] * scale;
  }
  return out;
}

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return d;
}

}  // namespace

AnchorSet fps(const MatrixF& features, std::span<const std::size_t> row_to_global, std::size_t m,
              std::size_t seed_row, double epsilon) {
  const std::size_t rows = features.rows();
  if (rows == 0) throw ValidationError("fps: empty feature set");
  if (row_to_global.size() != rows) throw ValidationError("fps: index map size != feature rows");
  if (m < 1 || m > rows) {
    throw ValidationError("fps: m = " + std::to_string(m) + " outside [1, " + std::to_string(rows) + "]");
  }
  if (seed_row >= rows) throw ValidationError("fps: seed row out of range");
  for (float v : features.data()) {
    if (!std::isfinite(v)) throw ValidationError("fps: non-finite feature");
  }

  const MatrixD unit = l2_normalize_rows(features, epsilon);
  std::vector<double> min_dist(rows, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(rows, 0);

  AnchorSet out;
  out.anchors.reserve(m);
  std::size_t current = seed_row;
  for (std::size_t step = 0; step < m; ++step) {
    chosen[current] = 1;
    out.anchors.push_back(row_to_global[current]);
    if (step + 1 == m) break;

    std::size_t best = rows;
    double best_dist = -1.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (chosen[r]) continue;
      min_dist[r] = std::min(min_dist[r], squared_distance(unit.row(r), unit.row(current)));
      if (min_dist[r] > best_dist) {
        best_dist = min_dist[r];
        best = r;
      }
    }
    current = best;
  }
  return out;
}

MatrixD head_avg_keys(const Tensor& keys) {
  if (keys.rank() != 3 || keys.numel() != keys.data.size()) {
    throw ValidationError("tensor 'enc_keys_penult' must be heads x N x d_k");
  }
  const auto heads = static_cast<std::size_t>(keys.dims[0]);
  const auto n = static_cast<std::size_t>(keys.dims[1]);
  const auto dk = static_cast<std::size_t>(keys.dims[2]);

  MatrixD g(n, dk, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const float* head = keys.data.data() + h * n * dk;
    for (std::size_t i = 0; i < n * dk; ++i) g.data()[i] += head[i];
  }
  for (double& v : g.data()) v /= static_cast<double>(heads);
  for (std::size_t j = 0; j < n; ++j) {
    auto row = g.row(j);
    double sq = 0.0;
    for (double v : row) sq += v * v;
    if (sq == 0.0) continue;
    const double norm = std::sqrt(sq);
    for (double& v : row) v /= norm;
  }
  return g;
}

Assignment assign(const MatrixD& g, std::span<const std::size_t> non_top, const AnchorSet& anchors) {
  if (anchors.anchors.empty()) throw ValidationError("assign: empty anchor set");
  std::vector<char> is_anchor(g.rows(), 0);
  for (std::size_t a : anchors.anchors) {
    if (a >= g.rows()) throw ValidationError("assign: anchor index out of range");
    is_anchor[a] = 1;
  }
  for (std::size_t a : anchors.anchors) {
    if (std::find(non_top.begin(), non_top.end(), a) == non_top.end()) {
      throw ValidationError("assign: anchor " + std::to_string(a) + " is not a non-selected token");
    }
  }

  Assignment out;
  for (std::size_t u : non_top) {
    if (u >= g.rows()) throw ValidationError("assign: token index out of range");
    if (is_anchor[u]) continue;
    auto gu = g.row(u);
    std::size_t best = anchors.anchors.front();
    double best_dot = -std::numeric_limits<double>::infinity();
    for (std::size_t a : anchors.anchors) {
      auto ga = g.row(a);
      double dot = 0.0;
      for (std::size_t c = 0; c < gu.size(); ++c) dot += gu[c] * ga[c];
      if (dot > best_dot) {
        best_dot = dot;
        best = a;
      }
    }
    out.members.push_back(u);
    out.anchor_of.push_back(best);
  }
  return out;
}

CompressedSequence merge(const MatrixF& proj_tokens, const Selection& selection,
                         const AnchorSet& anchors, const Assignment& assignment) {
  const std::size_t n = proj_tokens.rows();
  const std::size_t d = proj_tokens.cols();

  // Domain checks: top/non_top partition [0, N); anchors and members
  // partition non_top; every member points at an anchor.
  enum : char { kFree = 0, kTop, kNon, kAnchor, kMember };
  std::vector<char> role(n, kFree);
  for (std::size_t i : selection.top) {
    if (i >= n || role[i] != kFree) throw ValidationError("merge: invalid or repeated selected index");
    role[i] = kTop;
  }
  for (std::size_t i : selection.non_top) {
    if (i >= n || role[i] != kFree) throw ValidationError("merge: non_top overlaps selection");
    role[i] = kNon;
  }
  if (std::count(role.begin(), role.end(), kFree) != 0) {
    throw ValidationError("merge: selection does not cover every token");
  }
  std::vector<std::size_t> slot(n, 0);
  for (std::size_t k = 0; k < anchors.anchors.size(); ++k) {
    const std::size_t a = anchors.anchors[k];
    if (a >= n || role[a] != kNon) throw ValidationError("merge: anchor outside non_top");
    role[a] = kAnchor;
    slot[a] = k;
  }
  if (assignment.members.size() != assignment.anchor_of.size()) {
    throw ValidationError("merge: malformed assignment");
  }
  for (std::size_t i = 0; i < assignment.members.size(); ++i) {
    const std::size_t u = assignment.members[i];
    const std::size_t a = assignment.anchor_of[i];
    if (u >= n || role[u] != kNon) throw ValidationError("merge: assigned token outside non_top");
    if (a >= n || role[a] != kAnchor) throw ValidationError("merge: token assigned to a non-anchor");
    role[u] = kMember;
  }
  if (!anchors.anchors.empty() && std::count(role.begin(), role.end(), kNon) != 0) {
    throw ValidationError("merge: assignment does not cover every non-anchor token");
  }

  CompressedSequence out;
  out.tokens = MatrixF(selection.top.size() + anchors.anchors.size(), d);
  out.provenance.reserve(out.tokens.rows());
  std::size_t row = 0;
  for (std::size_t i : selection.top) {
    auto src = proj_tokens.row(i);
    std::copy(src.begin(), src.end(), out.tokens.row(row++).begin());
    out.provenance.push_back({Provenance::Kind::kRetained, i, {}});
  }

  std::vector<std::vector<std::size_t>> clusters(anchors.anchors.size());
  for (std::size_t k = 0; k < anchors.anchors.size(); ++k) clusters[k].push_back(anchors.anchors[k]);
  for (std::size_t i = 0; i < assignment.members.size(); ++i) {
    clusters[slot[assignment.anchor_of[i]]].push_back(assignment.members[i]);
  }
  std::vector<double> acc(d);
  for (std::size_t k = 0; k < clusters.size(); ++k) {
    auto& members = clusters[k];
    std::sort(members.begin() + 1, members.end());
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t j : members) {
      auto src = proj_tokens.row(j);
      for (std::size_t c = 0; c < d; ++c) acc[c] += src[c];
    }
    auto dst = out.tokens.row(row++);
    const double count = static_cast<double>(members.size());
    for (std::size_t c = 0; c < d; ++c) dst[c] = static_cast<float>(acc[c] / count);
    out.provenance.push_back({Provenance::Kind::kMerged, anchors.anchors[k], std::move(members)});
  }
  return out;
}

BudgetSplit split_budget(std::size_t budget, long long merge_count) {
  if (budget < 1) throw ValidationError("budget must be at least 1");
  std::size_t m = 0;
  if (merge_count < 0) {
    if (budget > 1) {
      const auto ratio = static_cast<long long>(std::llround(static_cast<double>(budget) * 20.0 / 128.0));
      m = static_cast<std::size_t>(std::clamp<long long>(ratio, 1, static_cast<long long>(budget) - 1));
    }
  } else {
    m = static_cast<std::size_t>(merge_count);
    if (m >= budget) {
      throw ValidationError("merge_count " + std::to_string(m) + " must be below budget " + std::to_string(budget));
    }
  }
  return {budget - m, m};
}

std::string_view to_string(SeedRule r) { return r == SeedRule::kSaliency ? "saliency" : "lowest_index"; }

SeedRule parse_seed_rule(std::string_view s) {
  if (s == "saliency") return SeedRule::kSaliency;
  if (s == "lowest_index") return SeedRule::kLowestIndex;
  throw ValidationError("unknown fps seed rule '" + std::string(s) + "' (saliency|lowest_index)");
}

EgtmResult egtm(const TensorDump& dump, const Selection& selection, std::size_t merge_count,
                std::span<const double> seed_scores, SeedRule seed_rule) {
  const MatrixF proj = to_matrix(dump.get(names::kProjTokens));
  EgtmResult result;
  if (merge_count == 0) {
    result.sequence = merge(proj, selection, result.anchors, result.assignment);
    return result;
  }
  const auto& non_top = selection.non_top;
  if (merge_count > non_top.size()) {
    throw ValidationError("merge count " + std::to_string(merge_count) + " exceeds " +
                          std::to_string(non_top.size()) + " non-selected tokens");
  }

  const MatrixF features = to_matrix(dump.get(names::kEncFeat));
  MatrixF non_features(non_top.size(), features.cols());
  for (std::size_t r = 0; r < non_top.size(); ++r) {
    auto src = features.row(non_top[r]);
    std::copy(src.begin(), src.end(), non_features.row(r).begin());
  }

  std::size_t seed_row = 0;
  if (seed_rule == SeedRule::kSaliency) {
    if (seed_scores.size() != features.rows()) throw ValidationError("seed scores length != N");
    for (std::size_t r = 1; r < non_top.size(); ++r) {
      if (seed_scores[non_top[r]] > seed_scores[non_top[seed_row]]) seed_row = r;
    }
  }

  result.anchors = fps(non_features, non_top, merge_count, seed_row);
  const MatrixD g = head_avg_keys(dump.get(names::kEncKeys));
  result.assignment = assign(g, non_top, result.anchors);
  result.sequence = merge(proj, selection, result.anchors, result.assignment);
  return result;
}

Container compressed_to_container(const CompressedSequence& seq, const SampleMeta& meta) {
  Container c;
  c.meta = meta;
  Tensor t{names::kCompressedTokens,
           {static_cast<int64_t>(seq.tokens.rows()), static_cast<int64_t>(seq.tokens.cols())},
           seq.tokens.data()};
  c.tensors.emplace(t.name, std::move(t));
  c.attachments = nlohmann::json{{"provenance", seq.provenance}};
  return c;
}

CompressedSequence compressed_from_container(const Container& c) {
  auto it = c.tensors.find(names::kCompressedTokens);
  if (it == c.tensors.end()) throw ValidationError("missing tensor 'compressed_tokens'");
  CompressedSequence seq;
  seq.tokens = to_matrix(it->second);
  if (!c.attachments.is_object() || !c.attachments.contains("provenance")) {
    throw ValidationError("compressed container lacks provenance");
  }
  for (const auto& p : c.attachments.at("provenance")) {
    Provenance prov;
    if (p.at("kind").get<std::string>() == "retained") {
      prov.kind = Provenance::Kind::kRetained;
      prov.source = p.at("source").get<std::size_t>();
    } else {
      prov.kind = Provenance::Kind::kMerged;
      prov.source = p.at("anchor").get<std::size_t>();
      prov.members = p.at("members").get<std::vector<std::size_t>>();
    }
    seq.provenance.push_back(std::move(prov));
  }
  if (seq.provenance.size() != seq.tokens.rows()) {
    throw ValidationError("provenance count does not match compressed token rows");
  }
  return seq;
}

}  // namespace cdrop
