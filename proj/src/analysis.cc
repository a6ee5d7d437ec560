#include "cdrop/analysis.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_set>

namespace cdrop {

double agreement(std::span<const std::size_t> i_s, std::span<const std::size_t> i_t, std::size_t k) {
  if (k == 0 || i_s.size() != k || i_t.size() != k) {
    throw ValidationError("agreement needs two index sets of size k = " + std::to_string(k));
  }
  std::unordered_set<std::size_t> teacher(i_t.begin(), i_t.end());
  const auto shared = std::count_if(i_s.begin(), i_s.end(), [&](std::size_t i) { return teacher.contains(i); });
  return static_cast<double>(shared) / static_cast<double>(k);
}

double disagreement(std::span<const std::size_t> i_s, std::span<const std::size_t> i_t, std::size_t k) {
  if (k == 0 || i_s.size() != k || i_t.size() != k) {
    throw ValidationError("disagreement needs two index sets of size k = " + std::to_string(k));
  }
  std::unordered_set<std::size_t> teacher(i_t.begin(), i_t.end());
  const auto only = std::count_if(i_s.begin(), i_s.end(), [&](std::size_t i) { return !teacher.contains(i); });
  return static_cast<double>(only) / static_cast<double>(k);
}

Correction correction(const RawSaliency& student, const RawSaliency& teacher, std::size_t k, double r) {
  const std::size_t n = student.size();
  if (teacher.size() != n) throw ValidationError("student and teacher saliency lengths differ");
  if (k < 1 || k > n) throw ValidationError("k outside [1, N]");
  if (r >= 1.0) throw ValidationError("correction factor is undefined for r = 1");
  const std::size_t swaps = recovery_swap_count(r, k);
  if (swaps == 0) return {0, 1.0};

  const auto student_rank = rank_descending(student.values);
  const auto teacher_rank = rank_descending(teacher.values);
  std::vector<char> kept(n, 0);
  for (std::size_t i = 0; i < k - swaps; ++i) kept[student_rank[i]] = 1;

  std::size_t found = 0;
  std::size_t depth = 0;
  while (found < swaps) {
    if (!kept[teacher_rank[depth]]) ++found;
    ++depth;
  }
  const double factor = (static_cast<double>(k) - static_cast<double>(depth)) /
                        (static_cast<double>(k) - static_cast<double>(swaps));
  return {depth, factor};
}

double correction_factor(const RawSaliency& student, const RawSaliency& teacher, std::size_t k, double r) {
  return correction(student, teacher, k, r).factor;
}

// ---------------------------------------------------------------------------

void CostModel::validate() const {
  if (n_layers <= 0 || n_kv_heads <= 0 || head_dim <= 0 || bytes_per_elem <= 0 || hidden <= 0 || ffn <= 0) {
    throw ValidationError("cost model fields must be positive integers");
  }
}

void to_json(nlohmann::json& j, const CostModel& m) {
  j = nlohmann::json{{"name", m.name},
                     {"n_layers", m.n_layers},
                     {"n_kv_heads", m.n_kv_heads},
                     {"head_dim", m.head_dim},
                     {"bytes_per_elem", m.bytes_per_elem},
                     {"hidden", m.hidden},
                     {"ffn", m.ffn}};
}

void from_json(const nlohmann::json& j, CostModel& m) {
  m.name = j.value("name", std::string("custom"));
  j.at("n_layers").get_to(m.n_layers);
  j.at("n_kv_heads").get_to(m.n_kv_heads);
  j.at("head_dim").get_to(m.head_dim);
  j.at("bytes_per_elem").get_to(m.bytes_per_elem);
  j.at("hidden").get_to(m.hidden);
  j.at("ffn").get_to(m.ffn);
}

CostModel cost_preset(std::string_view name) {
  // LLaMA-7B / LLaMA-13B geometry with fp16 caches.
  if (name == "llava7b") return {"llava7b", 32, 32, 128, 2, 4096, 11008};
  if (name == "llava13b") return {"llava13b", 40, 40, 128, 2, 5120, 13824};
  throw ValidationError("unknown model preset '" + std::string(name) + "'");
}

std::vector<std::string> cost_preset_names() { return {"llava7b", "llava13b"}; }

double kv_cache_mb(const CostModel& m, int64_t seq_len) {
  if (seq_len < 0) throw ValidationError("sequence length must be non-negative");
  const double bytes = 2.0 * static_cast<double>(m.n_layers) * static_cast<double>(m.n_kv_heads) *
                       static_cast<double>(seq_len) * static_cast<double>(m.head_dim) *
                       static_cast<double>(m.bytes_per_elem);
  return bytes / 1048576.0;
}

double flops_estimate(const CostModel& m, int64_t seq_len) {
  if (seq_len < 1) throw ValidationError("sequence length must be positive");
  const double s = static_cast<double>(seq_len);
  const double d = static_cast<double>(m.hidden);
  const double f = static_cast<double>(m.ffn);
  const double per_layer = 4.0 * s * d * d + 2.0 * s * s * d + 6.0 * s * d * f;
  return static_cast<double>(m.n_layers) * per_layer * 1e-12;
}

// ---------------------------------------------------------------------------

void SynthSpec::validate() const {
  if (n < 1) throw ValidationError("synthetic N must be positive");
  if (!(gt_sigma >= 0.0)) throw ValidationError("gt_sigma must be non-negative");
  if (!(noise_vision >= 0.0) || !(noise_cross >= 0.0)) throw ValidationError("noise must be non-negative");
  if (!(complementarity >= 0.0 && complementarity <= 1.0)) {
    throw ValidationError("complementarity must lie in [0, 1]");
  }
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"n", s.n},
                     {"gt_sigma", s.gt_sigma},
                     {"noise_vision", s.noise_vision},
                     {"noise_cross", s.noise_cross},
                     {"complementarity", s.complementarity},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  if (j.contains("n")) j.at("n").get_to(s.n);
  if (j.contains("gt_sigma")) j.at("gt_sigma").get_to(s.gt_sigma);
  if (j.contains("noise")) {
    j.at("noise").get_to(s.noise_vision);
    s.noise_cross = s.noise_vision;
  }
  if (j.contains("noise_vision")) j.at("noise_vision").get_to(s.noise_vision);
  if (j.contains("noise_cross")) j.at("noise_cross").get_to(s.noise_cross);
  if (j.contains("complementarity")) j.at("complementarity").get_to(s.complementarity);
  if (j.contains("seed")) j.at("seed").get_to(s.seed);
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void normalize_sum(std::vector<double>& v) {
  const double sum = std::accumulate(v.begin(), v.end(), 0.0);
  if (sum > 0.0) {
    for (double& x : v) x /= sum;
  }
}

}  // namespace

SynthSample generate_synth(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(splitmix64(spec.seed));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = spec.n;

  SynthSample out;
  std::vector<double> g(n);
  for (double& x : g) x = std::exp(spec.gt_sigma * normal(rng));
  normalize_sum(g);

  // Walk a random permutation, handing tokens to whichever exclusive set
  // holds less mass, until the exclusive mass reaches the target.
  out.vision_only.assign(n, 0);
  out.cross_only.assign(n, 0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  double vision_mass = 0.0;
  double cross_mass = 0.0;
  for (std::size_t j : order) {
    if (spec.complementarity < 1.0 && vision_mass + cross_mass >= spec.complementarity) break;
    if (vision_mass <= cross_mass) {
      out.vision_only[j] = 1;
      vision_mass += g[j];
    } else {
      out.cross_only[j] = 1;
      cross_mass += g[j];
    }
  }

  std::vector<double> sv(n);
  std::vector<double> sc(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double zv = normal(rng);
    const double zc = normal(rng);
    sv[j] = out.cross_only[j] ? 0.0 : g[j] * std::exp(spec.noise_vision * zv);
    sc[j] = out.vision_only[j] ? 0.0 : g[j] * std::exp(spec.noise_cross * zc);
  }
  normalize_sum(sv);
  normalize_sum(sc);

  out.ground_truth = {std::move(g), 1.0};
  out.vision = {std::move(sv), Modality::kVision, "synthetic"};
  out.cross = {std::move(sc), Modality::kCross, "synthetic"};
  return out;
}

std::vector<SynthSample> generate_corpus(const SynthSpec& spec, std::size_t count) {
  std::vector<SynthSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SynthSpec s = spec;
    s.seed = splitmix64(spec.seed ^ (0x5851f42d4c957f2dULL * (i + 1)));
    out.push_back(generate_synth(s));
  }
  return out;
}

SampleMeta toy_meta(int64_t n_visual, int64_t n_text, int64_t n_sys) {
  const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n_visual))));
  if (side * side != n_visual) throw ValidationError("toy_meta needs a square patch count");
  SampleMeta m;
  m.n_visual = n_visual;
  m.n_text = n_text;
  m.n_sys = n_sys;
  m.grid_h = side;
  m.grid_w = side;
  m.heads_llm = 2;
  m.head_dim_llm = 4;
  m.d_llm = 8;
  m.d_enc = 6;
  m.d_key = 4;
  m.heads_enc = 2;
  return m;
}

TensorDump synthetic_dump(const SyntheticDumpSpec& spec) {
  const SampleMeta& m = spec.meta;
  std::mt19937_64 rng(splitmix64(spec.seed));
  std::normal_distribution<float> normal(0.0f, 1.0f);
  auto random_tensor = [&](const char* name, std::vector<int64_t> dims) {
    Tensor t{name, std::move(dims), {}};
    t.data.resize(t.numel());
    for (float& v : t.data) v = normal(rng);
    return t;
  };

  TensorDump dump;
  dump.meta = m;

  const auto side = static_cast<std::size_t>(m.n_visual + 1);
  Tensor attn{names::kEncAttn, {m.heads_enc, m.n_visual + 1, m.n_visual + 1}, {}};
  attn.data.resize(attn.numel());
  std::vector<double> row(side);
  for (std::size_t r = 0; r < attn.data.size() / side; ++r) {
    double max_logit = -INFINITY;
    for (double& x : row) {
      x = 2.0 * normal(rng);
      max_logit = std::max(max_logit, x);
    }
    double sum = 0.0;
    for (double& x : row) {
      x = std::exp(x - max_logit);
      sum += x;
    }
    for (std::size_t c = 0; c < side; ++c) attn.data[r * side + c] = static_cast<float>(row[c] / sum);
  }
  dump.put(std::move(attn));
  dump.put(random_tensor(names::kEncFeat, {m.n_visual, m.d_enc}));
  dump.put(random_tensor(names::kEncKeys, {m.heads_enc, m.n_visual, m.d_key}));
  dump.put(random_tensor(names::kProjTokens, {m.n_visual, m.d_llm}));

  if (spec.precomputed_block) {
    Tensor block{names::kScapAttnBlock, {m.n_text, m.n_visual}, {}};
    block.data.resize(block.numel());
    std::uniform_real_distribution<float> uniform(0.0f, 1.0f);
    for (float& v : block.data) v = uniform(rng) / static_cast<float>(m.n_visual);
    dump.put(std::move(block));
  } else {
    dump.put(random_tensor(names::kScapQ, {m.heads_llm, m.seq_len(), m.head_dim_llm}));
    dump.put(random_tensor(names::kScapK, {m.heads_llm, m.seq_len(), m.head_dim_llm}));
  }
  return dump;
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const StudyRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"sample_id", r.sample_id},
                     {"k", r.k},
                     {"agreement", r.agreement},
                     {"disagreement", r.disagreement},
                     {"correction_factor", opt(r.correction_factor)},
                     {"correction_depth", r.correction_depth},
                     {"recovery_rate", r.recovery_rate},
                     {"student", to_string(r.student)},
                     {"recall_vision", opt(r.recall_vision)},
                     {"recall_cross", opt(r.recall_cross)},
                     {"recall_recovery", opt(r.recall_recovery)},
                     {"recall_convex", opt(r.recall_convex)}};
}

void to_json(nlohmann::json& j, const StudySummary& s) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"samples", s.samples},
                     {"k", s.k},
                     {"recovery_rate", s.recovery_rate},
                     {"student", to_string(s.student)},
                     {"mean_agreement", s.mean_agreement},
                     {"mean_correction_factor", opt(s.mean_correction_factor)},
                     {"recall_vision", opt(s.recall_vision)},
                     {"recall_cross", opt(s.recall_cross)},
                     {"recall_recovery", opt(s.recall_recovery)},
                     {"recall_convex", opt(s.recall_convex)}};
}

double recall(std::span<const double> ground_truth, std::span<const std::size_t> indices) {
  const double total = std::accumulate(ground_truth.begin(), ground_truth.end(), 0.0);
  if (!(total > 0.0)) throw ValidationError("ground truth has no mass");
  double covered = 0.0;
  for (std::size_t i : indices) covered += ground_truth[i];
  return covered / total;
}

StudyRecord study_sample(const StudyItem& item, std::size_t k, double r, Modality student,
                         const FuserConfig& convex) {
  const bool vision_student = student == Modality::kVision;
  const RawSaliency& s_student = vision_student ? item.vision : item.cross;
  const RawSaliency& s_teacher = vision_student ? item.cross : item.vision;

  const Selection top_vision = top_k(std::span<const double>(item.vision.values), k);
  const Selection top_cross = top_k(std::span<const double>(item.cross.values), k);
  const auto& i_s = vision_student ? top_vision.top : top_cross.top;
  const auto& i_t = vision_student ? top_cross.top : top_vision.top;

  StudyRecord rec;
  rec.sample_id = item.id;
  rec.k = k;
  rec.recovery_rate = r;
  rec.student = student;
  rec.agreement = agreement(i_s, i_t, k);
  rec.disagreement = disagreement(i_s, i_t, k);
  if (r < 1.0) {
    const Correction c = correction(s_student, s_teacher, k, r);
    rec.correction_factor = c.factor;
    rec.correction_depth = c.depth;
  }

  if (item.ground_truth) {
    const Selection recovered = recovery_fuse(s_student, s_teacher, k, r);
    const auto fused = convex_fuse(temperature_normalize(item.vision, convex.tau_v),
                                   temperature_normalize(item.cross, convex.tau_c), convex.alpha);
    const Selection top_fused = top_k(std::span<const double>(fused.values), k);
    const auto& gt = *item.ground_truth;
    rec.recall_vision = recall(gt, top_vision.top);
    rec.recall_cross = recall(gt, top_cross.top);
    rec.recall_recovery = recall(gt, recovered.top);
    rec.recall_convex = recall(gt, top_fused.top);
  }
  return rec;
}

StudyResult study_recovery(std::span<const StudyItem> corpus, std::size_t k, double r, Modality student,
                           const FuserConfig& convex, std::size_t workers) {
  if (corpus.empty()) throw ValidationError("empty study corpus");
  StudyResult result;
  result.records.resize(corpus.size());

  workers = std::clamp<std::size_t>(workers, 1, corpus.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < corpus.size(); i = next++) {
      try {
        result.records[i] = study_sample(corpus[i], k, r, student, convex);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  }
  if (failure) std::rethrow_exception(failure);

  StudySummary& s = result.summary;
  s.samples = corpus.size();
  s.k = k;
  s.recovery_rate = r;
  s.student = student;
  const double count = static_cast<double>(corpus.size());
  auto mean_of = [&](auto field) -> std::optional<double> {
    double sum = 0.0;
    for (const auto& rec : result.records) {
      const std::optional<double> v = field(rec);
      if (!v) return std::nullopt;
      sum += *v;
    }
    return sum / count;
  };
  s.mean_agreement = *mean_of([](const StudyRecord& x) { return std::optional<double>(x.agreement); });
  s.mean_correction_factor = mean_of([](const StudyRecord& x) { return x.correction_factor; });
  s.recall_vision = mean_of([](const StudyRecord& x) { return x.recall_vision; });
  s.recall_cross = mean_of([](const StudyRecord& x) { return x.recall_cross; });
  s.recall_recovery = mean_of([](const StudyRecord& x) { return x.recall_recovery; });
  s.recall_convex = mean_of([](const StudyRecord& x) { return x.recall_convex; });
  return result;
}

std::vector<StudyItem> to_study_items(const std::vector<SynthSample>& samples) {
  std::vector<StudyItem> items;
  items.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    items.push_back({"synth-" + std::to_string(i), samples[i].vision, samples[i].cross,
                     samples[i].ground_truth.values});
  }
  return items;
}

}  // namespace cdrop
