#include "cli.h"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <json.hpp>

#include "cdrop/analysis.h"
#include "cdrop/egtm.h"
#include "cdrop/pipeline.h"
#include "cdrop/saliency.h"
#include "cdrop/tensor_io.h"

namespace cdrop::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Verbosity from CDK_LOG: error, warn (default), info, debug.
class Log {
 public:
  explicit Log(std::ostream& err) : err_(err) {
    const char* env = std::getenv("CDK_LOG");
    const std::string level = env ? env : "warn";
    if (level == "error") level_ = 0;
    else if (level == "info") level_ = 2;
    else if (level == "debug") level_ = 3;
  }
  void info(const std::string& msg) const { emit(2, "info", msg); }
  void debug(const std::string& msg) const { emit(3, "debug", msg); }

 private:
  void emit(int level, const char* tag, const std::string& msg) const {
    if (level <= level_) err_ << "[" << tag << "] " << msg << '\n';
  }
  std::ostream& err_;
  int level_ = 1;
};

int report_error(std::ostream& err, int code, const std::string& kind, const std::string& message,
                 json extra = json::object()) {
  json j{{"error", kind}, {"message", message}};
  for (auto& [k, v] : extra.items()) j[k] = v;
  err << j.dump() << '\n';
  return code;
}

int report_error(std::ostream& err, const Error& e) {
  json extra = json::object();
  if (const auto* d = dynamic_cast<const DumpError*>(&e)) {
    extra["tensor"] = d->tensor();
    extra["offset"] = d->offset();
  }
  if (const auto* p = dynamic_cast<const PipelineError*>(&e)) extra["stage"] = p->stage();
  const bool io = e.kind() == Error::Kind::kIo;
  return report_error(err, io ? kExitIo : kExitValidation, io ? "io" : "validation", e.what(), extra);
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> items;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<T>) {
        out.push_back(static_cast<T>(std::stod(item, &used)));
      } else {
        const long long v = std::stoll(item, &used);
        if (v < 0) throw std::invalid_argument(item);
        out.push_back(static_cast<T>(v));
      }
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ValidationError(std::string("bad ") + what + " entry '" + item + "'");
    }
  }
  return out;
}

// Flags shared by prune/scores. Values apply only when given, on top of the
// config file.
struct PipelineFlags {
  std::string config_path;
  std::size_t budget = 0;
  double alpha = 0, tau_v = 0, tau_c = 0, recovery_rate = 0;
  std::string strategy, student, merge_count, vision_mode, cross_strategy, fps_seed;
  CLI::Option *budget_opt = nullptr, *alpha_opt = nullptr, *tau_v_opt = nullptr, *tau_c_opt = nullptr,
              *rate_opt = nullptr;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "pipeline JSON config");
    budget_opt = app.add_option("--budget", budget, "total visual tokens kept (K + M)");
    alpha_opt = app.add_option("--alpha", alpha, "convex fuser vision weight");
    tau_v_opt = app.add_option("--tau-v", tau_v, "vision temperature");
    tau_c_opt = app.add_option("--tau-c", tau_c, "cross-modal temperature");
    app.add_option("--strategy", strategy, "fuser: convex | recovery");
    app.add_option("--student", student, "recovery student: vision | cross");
    rate_opt = app.add_option("--recovery-rate", recovery_rate, "recovery swap rate r");
    app.add_option("--merge-count", merge_count, "merged tokens M, or 'auto'");
    app.add_option("--vision-mode", vision_mode, "class | tokens");
    app.add_option("--cross-strategy", cross_strategy, "all | last | max");
    app.add_option("--fps-seed", fps_seed, "saliency | lowest_index");
  }

  PipelineConfig resolve() const {
    PipelineConfig cfg;
    if (!config_path.empty()) read_json_file(config_path).get_to(cfg);
    if (budget_opt->count()) cfg.budget = budget;
    if (alpha_opt->count()) cfg.fuser.alpha = alpha;
    if (tau_v_opt->count()) cfg.fuser.tau_v = tau_v;
    if (tau_c_opt->count()) cfg.fuser.tau_c = tau_c;
    if (!strategy.empty()) cfg.fuser.strategy = parse_fuse_strategy(strategy);
    if (!student.empty()) cfg.fuser.student = parse_modality(student);
    if (rate_opt->count()) cfg.fuser.recovery_rate = recovery_rate;
    if (!merge_count.empty()) json{{"merge_count", merge_count == "auto" ? json("auto") : json(std::stoll(merge_count))}}.get_to(cfg);
    if (!vision_mode.empty()) cfg.vision_mode = parse_vision_mode(vision_mode);
    if (!cross_strategy.empty()) cfg.cross_strategy = parse_cross_strategy(cross_strategy);
    if (!fps_seed.empty()) cfg.fps_seed = parse_seed_rule(fps_seed);
    cfg.validate();
    return cfg;
  }
};

std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

// ---------------------------------------------------------------------------

int cmd_prune(const fs::path& dump_path, const PipelineFlags& flags, const fs::path& out_path,
              fs::path report_path, std::ostream& out, const Log& log) {
  const PipelineConfig cfg = flags.resolve();
  const TensorDump dump = read_dump(dump_path);
  log.info(fmt::format("loaded {} (N={}, S={})", dump_path.string(), dump.meta.n_visual, dump.meta.seq_len()));
  const PipelineResult result = consensus_drop(dump, cfg);

  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_container(compressed_to_container(result.sequence, dump.meta), out_path);
  if (report_path.empty()) report_path = fs::path(out_path.string() + ".report.json");
  write_text_file(report_path, result.report.to_json().dump(2) + "\n");

  out << fmt::format("K={} M={} rows={} -> {}\n", result.report.keep, result.report.merge,
                     result.sequence.tokens.rows(), out_path.string());
  return kExitOk;
}

int cmd_scores(const fs::path& dump_path, const PipelineFlags& flags, const fs::path& out_path,
               std::ostream& out) {
  const PipelineConfig cfg = flags.resolve();
  const TensorDump dump = read_dump(dump_path);
  const RawSaliency s_v = vision_saliency(dump, cfg.vision_mode);
  const RawSaliency s_c = cross_saliency(dump, cfg.cross_strategy, cfg.epsilon);
  const auto v_hat = temperature_normalize(s_v, cfg.fuser.tau_v);
  const auto c_hat = temperature_normalize(s_c, cfg.fuser.tau_c);
  json j{{"n_visual", dump.meta.n_visual},
         {"vision_mode", to_string(cfg.vision_mode)},
         {"cross_strategy", to_string(cfg.cross_strategy)},
         {"vision", s_v.values},
         {"cross", s_c.values},
         {"vision_normalized", v_hat.values},
         {"cross_normalized", c_hat.values}};
  if (cfg.fuser.strategy == FuseStrategy::kConvex) {
    j["fused"] = convex_fuse(v_hat, c_hat, cfg.fuser.alpha).values;
  }
  if (out_path.empty()) {
    out << j.dump() << '\n';
  } else {
    write_text_file(out_path, j.dump() + "\n");
  }
  return kExitOk;
}

struct EstimateRow {
  std::size_t budget;
  int64_t seq_len;
  double kv_mb;
  double tflops;
};

int cmd_estimate(const std::string& preset, const std::string& model_path, const std::string& budgets_arg,
                 int64_t context, const std::string& csv_path, const std::string& format, std::ostream& out) {
  CostModel model = model_path.empty() ? cost_preset(preset) : read_json_file(model_path).get<CostModel>();
  model.validate();
  if (context < 0) throw ValidationError("context must be non-negative");
  const auto budgets = parse_list<std::size_t>(budgets_arg, "budget");

  std::vector<EstimateRow> rows;
  for (std::size_t b : budgets) {
    const int64_t s = static_cast<int64_t>(b) + context;
    rows.push_back({b, s, kv_cache_mb(model, s), s > 0 ? flops_estimate(model, s) : 0.0});
  }

  std::string csv = "budget,seq_len,kv_mb,tflops\n";
  for (const auto& r : rows) csv += fmt::format("{},{},{},{:.4f}\n", r.budget, r.seq_len, r.kv_mb, r.tflops);

  if (format == "csv") {
    out << csv;
  } else {
    out << fmt::format("model {} (L={} H={} D={} B={}), context {} tokens\n", model.name, model.n_layers,
                       model.n_kv_heads, model.head_dim, model.bytes_per_elem, context);
    out << fmt::format("{:>8} {:>8} {:>10} {:>10}\n", "budget", "seq_len", "KV(MB)", "TFLOPs");
    for (const auto& r : rows) {
      out << fmt::format("{:>8} {:>8} {:>10} {:>10.4f}\n", r.budget, r.seq_len, r.kv_mb, r.tflops);
    }
  }
  if (!csv_path.empty()) write_text_file(csv_path, csv);
  return kExitOk;
}

struct StudyOptions {
  std::string spec_path;
  std::string corpus_dir;
  std::size_t samples = 32;
  std::size_t k = 0;
  std::string r_list = "0.1,0.3,0.5";
  std::string student = "vision";
  double alpha = 0.7, tau_v = 1.0, tau_c = 1.0;
  uint64_t seed = 0;
  std::size_t workers = 0;
  std::string out_dir;
  // Synthetic overrides.
  std::size_t n = 0;
  double noise = -1.0, complementarity = -1.0, gt_sigma = -1.0;
  CLI::Option* seed_opt = nullptr;
};

std::vector<StudyItem> load_dump_corpus(const fs::path& dir, const Log& log) {
  if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".cdt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<StudyItem> items;
  for (const auto& f : files) {
    const TensorDump dump = read_dump(f);
    StudyItem item{f.stem().string(), vision_saliency(dump, VisionMode::kClass),
                   cross_saliency(dump, CrossStrategy::kAll), std::nullopt};
    if (dump.has("gt_saliency")) item.ground_truth = std::vector<double>(dump.get("gt_saliency").data.begin(), dump.get("gt_saliency").data.end());
    items.push_back(std::move(item));
  }
  log.info(fmt::format("loaded {} dumps from {}", items.size(), dir.string()));
  return items;
}

int cmd_study(const StudyOptions& o, std::ostream& out, const Log& log) {
  std::vector<StudyItem> corpus;
  if (!o.corpus_dir.empty()) {
    corpus = load_dump_corpus(o.corpus_dir, log);
  } else {
    SynthSpec spec;
    if (!o.spec_path.empty()) read_json_file(o.spec_path).get_to(spec);
    if (o.n) spec.n = o.n;
    if (o.noise >= 0) spec.noise_vision = spec.noise_cross = o.noise;
    if (o.complementarity >= 0) spec.complementarity = o.complementarity;
    if (o.gt_sigma >= 0) spec.gt_sigma = o.gt_sigma;
    if (o.seed_opt->count()) spec.seed = o.seed;
    corpus = to_study_items(generate_corpus(spec, o.samples));
  }
  if (corpus.empty()) throw ValidationError("empty study corpus");

  const auto rates = parse_list<double>(o.r_list, "recovery rate");
  if (rates.empty()) throw ValidationError("empty recovery-rate list");
  const Modality student = parse_modality(o.student);
  FuserConfig convex;
  convex.alpha = o.alpha;
  convex.tau_v = o.tau_v;
  convex.tau_c = o.tau_c;
  convex.validate();
  const std::size_t workers = o.workers ? o.workers : default_workers();

  std::string jsonl;
  json summaries = json::array();
  std::string csv = "r,method,agreement,cf,recall\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); };
  for (double r : rates) {
    const StudyResult res = study_recovery(corpus, o.k, r, student, convex, workers);
    for (const auto& rec : res.records) jsonl += json(rec).dump() + "\n";
    summaries.push_back(res.summary);
    const auto& s = res.summary;
    const std::pair<const char*, std::optional<double>> methods[] = {{"vision", s.recall_vision},
                                                                     {"cross", s.recall_cross},
                                                                     {"recovery", s.recall_recovery},
                                                                     {"convex", s.recall_convex}};
    for (const auto& [name, rec] : methods) {
      csv += fmt::format("{},{},{},{},{}\n", r, name, s.mean_agreement, cell(s.mean_correction_factor), cell(rec));
    }
  }

  const fs::path dir(o.out_dir);
  write_text_file(dir / "records.jsonl", jsonl);
  write_text_file(dir / "summary.json", summaries.dump(2) + "\n");
  write_text_file(dir / "study.csv", csv);
  out << csv;
  return kExitOk;
}

struct SynthOptions {
  std::string spec_path;
  std::size_t n = 0;
  double noise = -1, noise_vision = -1, noise_cross = -1, complementarity = -1, gt_sigma = -1;
  uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string out_path;
  std::string dump_path;
  int64_t n_text = 4, n_sys = 2;
  bool precomputed = false;
};

int cmd_synth(const SynthOptions& o, std::ostream& out) {
  if (!o.dump_path.empty()) {
    SyntheticDumpSpec spec;
    spec.meta = toy_meta(static_cast<int64_t>(o.n ? o.n : 576), o.n_text, o.n_sys);
    spec.precomputed_block = o.precomputed;
    spec.seed = o.seed;
    const TensorDump dump = synthetic_dump(spec);
    write_dump(dump, o.dump_path);
    out << fmt::format("wrote synthetic dump N={} -> {}\n", dump.meta.n_visual, o.dump_path);
    return kExitOk;
  }
  SynthSpec spec;
  if (!o.spec_path.empty()) read_json_file(o.spec_path).get_to(spec);
  if (o.n) spec.n = o.n;
  if (o.noise >= 0) spec.noise_vision = spec.noise_cross = o.noise;
  if (o.noise_vision >= 0) spec.noise_vision = o.noise_vision;
  if (o.noise_cross >= 0) spec.noise_cross = o.noise_cross;
  if (o.complementarity >= 0) spec.complementarity = o.complementarity;
  if (o.gt_sigma >= 0) spec.gt_sigma = o.gt_sigma;
  if (o.seed_opt->count()) spec.seed = o.seed;
  const SynthSample s = generate_synth(spec);
  const json j{{"spec", spec},
               {"ground_truth", s.ground_truth.values},
               {"vision", s.vision.values},
               {"cross", s.cross.values},
               {"vision_only", s.vision_only},
               {"cross_only", s.cross_only}};
  if (o.out_path.empty()) {
    out << j.dump() << '\n';
  } else {
    write_text_file(o.out_path, j.dump() + "\n");
  }
  return kExitOk;
}

int cmd_validate(const fs::path& dump_path, std::ostream& out, std::ostream& err) {
  std::ifstream probe(dump_path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + dump_path.string());
  probe.close();
  const Container c = read_container(dump_path);
  TensorDump dump;
  try {
    dump.meta = c.meta.get<SampleMeta>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed meta: ") + e.what());
  }
  dump.tensors = c.tensors;
  ValidationReport report = validate_dump(dump);
  for (auto& v : report) {
    if (auto it = c.payload_offsets.find(v.tensor); it != c.payload_offsets.end()) v.byte_offset = it->second;
  }
  out << report_to_jsonl(report);
  if (!report.empty()) {
    err << json{{"error", "validation"}, {"message", std::to_string(report.size()) + " violation(s)"}}.dump() << '\n';
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const Log log(err);
  CLI::App app{"Consensus visual-token compression toolkit", "cdrop"};
  app.require_subcommand(1);

  auto* prune = app.add_subcommand("prune", "compress one dump into K retained + M merged tokens");
  std::string prune_dump, prune_out, prune_report;
  PipelineFlags prune_flags;
  prune->add_option("dump", prune_dump, "input CDT1 dump")->required();
  prune->add_option("--out", prune_out, "output CDT1 with compressed_tokens")->required();
  prune->add_option("--report", prune_report, "selection report JSON (default <out>.report.json)");
  prune_flags.attach(*prune);

  auto* scores = app.add_subcommand("scores", "emit raw and normalized saliency vectors as JSON");
  std::string scores_dump, scores_out;
  PipelineFlags scores_flags;
  scores->add_option("dump", scores_dump, "input CDT1 dump")->required();
  scores->add_option("--out", scores_out, "output JSON (default stdout)");
  scores_flags.attach(*scores);

  auto* estimate = app.add_subcommand("estimate", "analytical KV-cache and FLOPs per budget");
  std::string preset = "llava7b", model_path, budgets = "576,192,128,64,32", csv_path, format = "text";
  int64_t context = 66;
  estimate->add_option("--preset", preset, "llava7b | llava13b")->capture_default_str();
  estimate->add_option("--model", model_path, "CostModel JSON (overrides --preset)");
  estimate->add_option("--budgets", budgets, "comma-separated visual-token budgets")->capture_default_str();
  estimate->add_option("--context", context, "non-visual tokens in the sequence")->capture_default_str();
  estimate->add_option("--out,--csv", csv_path, "also write CSV here");
  estimate->add_option("--format", format, "text | csv")->check(CLI::IsMember({"text", "csv"}));

  auto* study = app.add_subcommand("study", "recovery/agreement study over a corpus");
  StudyOptions study_opts;
  study->add_option("--spec", study_opts.spec_path, "SynthSpec JSON");
  study->add_option("--corpus", study_opts.corpus_dir, "directory of .cdt dumps");
  study->add_option("--samples", study_opts.samples, "synthetic samples")->capture_default_str();
  study->add_option("--k", study_opts.k, "retained tokens")->required();
  study->add_option("--r-list", study_opts.r_list, "comma-separated recovery rates")->capture_default_str();
  study->add_option("--student", study_opts.student, "vision | cross")->capture_default_str();
  study->add_option("--alpha", study_opts.alpha)->capture_default_str();
  study->add_option("--tau-v", study_opts.tau_v)->capture_default_str();
  study->add_option("--tau-c", study_opts.tau_c)->capture_default_str();
  study_opts.seed_opt = study->add_option("--seed", study_opts.seed);
  study->add_option("--workers", study_opts.workers, "worker threads (default: all cores)");
  study->add_option("--out", study_opts.out_dir, "output directory")->required();
  study->add_option("--n", study_opts.n, "synthetic N");
  study->add_option("--noise", study_opts.noise, "synthetic noise (both modalities)");
  study->add_option("--complementarity", study_opts.complementarity);
  study->add_option("--gt-sigma", study_opts.gt_sigma);

  auto* synth = app.add_subcommand("synth", "generate a synthetic saliency sample or dump");
  SynthOptions synth_opts;
  synth->add_option("--spec", synth_opts.spec_path, "SynthSpec JSON");
  synth->add_option("--n", synth_opts.n, "token count");
  synth->add_option("--noise", synth_opts.noise);
  synth->add_option("--noise-vision", synth_opts.noise_vision);
  synth->add_option("--noise-cross", synth_opts.noise_cross);
  synth->add_option("--complementarity", synth_opts.complementarity);
  synth->add_option("--gt-sigma", synth_opts.gt_sigma);
  synth_opts.seed_opt = synth->add_option("--seed", synth_opts.seed);
  synth->add_option("--out", synth_opts.out_path, "sample JSON (default stdout)");
  synth->add_option("--dump", synth_opts.dump_path, "write a random CDT1 dump instead (N must be square)");
  synth->add_option("--n-text", synth_opts.n_text)->capture_default_str();
  synth->add_option("--n-sys", synth_opts.n_sys)->capture_default_str();
  synth->add_flag("--precomputed", synth_opts.precomputed, "store scap_attn_block instead of Q/K");

  auto* validate = app.add_subcommand("validate", "check a dump; violations as JSON lines");
  std::string validate_dump_path;
  validate->add_option("dump", validate_dump_path, "input CDT1 dump")->required();

  std::vector<const char*> argv{"cdrop"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report_error(err, kExitValidation, "usage", e.what());
  }

  try {
    if (prune->parsed()) return cmd_prune(prune_dump, prune_flags, prune_out, prune_report, out, log);
    if (scores->parsed()) return cmd_scores(scores_dump, scores_flags, scores_out, out);
    if (estimate->parsed()) return cmd_estimate(preset, model_path, budgets, context, csv_path, format, out);
    if (study->parsed()) return cmd_study(study_opts, out, log);
    if (synth->parsed()) return cmd_synth(synth_opts, out);
    if (validate->parsed()) return cmd_validate(validate_dump_path, out, err);
  } catch (const Error& e) {
    return report_error(err, e);
  } catch (const json::exception& e) {
    return report_error(err, kExitValidation, "validation", e.what());
  } catch (const fs::filesystem_error& e) {
    return report_error(err, kExitIo, "io", e.what());
  } catch (const std::invalid_argument& e) {
    return report_error(err, kExitValidation, "validation", e.what());
  }
  return report_error(err, kExitValidation, "usage", "no subcommand");
}

}  // namespace cdrop::cli
