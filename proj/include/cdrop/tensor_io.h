#pragma once

// CDT1 tensor dump container.
//
// Layout (all integers little-endian):
//
//   bytes [0, 4)     magic "CDT1"
//   bytes [4, 12)    u64 header length H
//   bytes [12, 12+H) UTF-8 JSON header
//   bytes [12+H, ..) tensor payloads, row-major f32 LE, concatenated in
//                    header-directory order (sorted by tensor name)
//
// Header:
//   {
//     "meta":        { SampleMeta fields },
//     "tensors":     [ {"name", "dtype": "f32", "dims", "offset", "nbytes"} ],
//     "attachments": { ... }            // optional, free-form JSON
//   }
//
// `offset` is relative to the first payload byte. The header is serialized
// with sorted keys and no whitespace so identical dumps produce identical
// bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdrop/tensor.h"

namespace cdrop {

inline constexpr char kMagic[4] = {'C', 'D', 'T', '1'};

// Canonical tensor names carried by an input dump.
namespace names {
inline constexpr const char* kEncAttn = "enc_attn_penult";
inline constexpr const char* kEncFeat = "enc_feat_penult";
inline constexpr const char* kEncKeys = "enc_keys_penult";
inline constexpr const char* kProjTokens = "proj_tokens";
inline constexpr const char* kScapQ = "scap_q";
inline constexpr const char* kScapK = "scap_k";
inline constexpr const char* kScapAttnBlock = "scap_attn_block";
inline constexpr const char* kCompressedTokens = "compressed_tokens";
}  // namespace names

struct SampleMeta {
  int64_t n_visual = 0;
  int64_t n_text = 0;
  int64_t n_sys = 0;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
  int64_t d_llm = 0;
  int64_t d_enc = 0;
  int64_t d_key = 0;
  int64_t heads_llm = 0;
  int64_t heads_enc = 0;
  int64_t head_dim_llm = 0;

  // Full SCAP sequence length n_sys + n_visual + n_text.
  int64_t seq_len() const { return n_sys + n_visual + n_text; }

  friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

void to_json(nlohmann::json& j, const SampleMeta& m);
void from_json(const nlohmann::json& j, SampleMeta& m);

struct TensorDump {
  SampleMeta meta;
  std::map<std::string, Tensor> tensors;

  bool has(const std::string& name) const { return tensors.contains(name); }
  // Throws ValidationError naming the tensor when absent.
  const Tensor& get(const std::string& name) const;
  void put(Tensor t);

  friend bool operator==(const TensorDump&, const TensorDump&) = default;
};

// One invariant violation. Violations are data, not errors.
struct Violation {
  std::string code;     // e.g. "grid_mismatch", "row_not_stochastic"
  std::string tensor;   // empty for meta-level violations
  std::string message;
  std::optional<int64_t> index;  // row index or flat element index, per code
  std::optional<uint64_t> byte_offset;  // absolute file offset when known
};

void to_json(nlohmann::json& j, const Violation& v);

using ValidationReport = std::vector<Violation>;

// Row-sum tolerance for tensors declared as attention.
inline constexpr double kAttentionRowTolerance = 1e-4;

ValidationReport validate_dump(const TensorDump& dump);

// One JSON object per line.
std::string report_to_jsonl(const ValidationReport& report);

// Raised while decoding a container. Carries the offending tensor (may be
// empty for header-level problems) and the absolute byte offset.
class DumpError : public ValidationError {
 public:
  DumpError(const std::string& what, std::string tensor, uint64_t offset);

  const std::string& tensor() const { return tensor_; }
  uint64_t offset() const { return offset_; }

 private:
  std::string tensor_;
  uint64_t offset_;
};

// Low-level container: meta and attachments are kept as raw JSON so the
// same codec serves input dumps and compressed outputs.
struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
  nlohmann::json attachments;  // null when absent
  // Absolute file offset of each tensor payload; filled by decode only.
  std::map<std::string, uint64_t> payload_offsets;
};

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

// Reads and fully validates an input dump; the first violation is raised as
// a DumpError with the absolute byte offset of the offending data.
TensorDump read_dump(const std::filesystem::path& path);

// Validates, then writes. Throws ValidationError on an invalid dump and
// IoError on filesystem failures.
void write_dump(const TensorDump& dump, const std::filesystem::path& path);

// In-memory codec used by read_dump/write_dump.
std::string encode_dump(const TensorDump& dump);
TensorDump decode_dump(const std::string& bytes);

}  // namespace cdrop
