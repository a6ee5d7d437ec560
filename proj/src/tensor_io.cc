#include "cdrop/tensor_io.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cdrop {

namespace {

using nlohmann::json;

constexpr std::size_t kPreambleBytes = 12;  // magic + u64 header length

uint32_t bswap32(uint32_t v) {
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

void append_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

uint64_t read_u64_le(const std::string& in, std::size_t pos) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

void append_f32_le(std::string& out, std::span<const float> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(float));
  char* dst = out.data() + start;
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, values.data(), values.size() * sizeof(float));
  } else {
    for (float f : values) {
      uint32_t bits = bswap32(std::bit_cast<uint32_t>(f));
      std::memcpy(dst, &bits, sizeof bits);
      dst += sizeof bits;
    }
  }
}

std::vector<float> read_f32_le(const std::string& in, std::size_t pos, std::size_t count) {
  std::vector<float> out(count);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), in.data() + pos, count * sizeof(float));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      uint32_t bits;
      std::memcpy(&bits, in.data() + pos + i * sizeof bits, sizeof bits);
      out[i] = std::bit_cast<float>(bswap32(bits));
    }
  }
  return out;
}

std::string dims_str(std::span<const int64_t> dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

// Expected dims for each canonical tensor; empty if the name is not canonical.
std::vector<int64_t> canonical_dims(const std::string& name, const SampleMeta& m) {
  const int64_t n = m.n_visual;
  if (name == names::kEncAttn) return {m.heads_enc, n + 1, n + 1};
  if (name == names::kEncFeat) return {n, m.d_enc};
  if (name == names::kEncKeys) return {m.heads_enc, n, m.d_key};
  if (name == names::kProjTokens) return {n, m.d_llm};
  if (name == names::kScapQ || name == names::kScapK) {
    return {m.heads_llm, m.seq_len(), m.head_dim_llm};
  }
  if (name == names::kScapAttnBlock) return {m.n_text, n};
  return {};
}

}  // namespace

std::size_t element_count(std::span<const int64_t> dims) {
  if (dims.empty()) return 0;
  std::size_t n = 1;
  for (int64_t d : dims) n *= static_cast<std::size_t>(std::max<int64_t>(d, 0));
  return n;
}

std::size_t Tensor::numel() const { return element_count(dims); }

MatrixF to_matrix(const Tensor& t) {
  if (t.rank() != 2) {
    throw ValidationError("tensor '" + t.name + "' is not rank 2: dims " + dims_str(t.dims));
  }
  return MatrixF(static_cast<std::size_t>(t.dims[0]), static_cast<std::size_t>(t.dims[1]), t.data);
}

void to_json(json& j, const SampleMeta& m) {
  j = json{{"n_visual", m.n_visual}, {"n_text", m.n_text},       {"n_sys", m.n_sys},
           {"grid_h", m.grid_h},     {"grid_w", m.grid_w},       {"d_llm", m.d_llm},
           {"d_enc", m.d_enc},       {"d_key", m.d_key},         {"heads_llm", m.heads_llm},
           {"heads_enc", m.heads_enc}, {"head_dim_llm", m.head_dim_llm}};
}

void from_json(const json& j, SampleMeta& m) {
  j.at("n_visual").get_to(m.n_visual);
  j.at("n_text").get_to(m.n_text);
  j.at("n_sys").get_to(m.n_sys);
  j.at("grid_h").get_to(m.grid_h);
  j.at("grid_w").get_to(m.grid_w);
  j.at("d_llm").get_to(m.d_llm);
  j.at("d_enc").get_to(m.d_enc);
  j.at("d_key").get_to(m.d_key);
  j.at("heads_llm").get_to(m.heads_llm);
  j.at("heads_enc").get_to(m.heads_enc);
  j.at("head_dim_llm").get_to(m.head_dim_llm);
}

const Tensor& TensorDump::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ValidationError("missing tensor '" + name + "'");
  return it->second;
}

void TensorDump::put(Tensor t) {
  std::string key = t.name;
  tensors.insert_or_assign(std::move(key), std::move(t));
}

void to_json(json& j, const Violation& v) {
  j = json{{"code", v.code}, {"tensor", v.tensor}, {"message", v.message}};
  if (v.index) j["index"] = *v.index;
  if (v.byte_offset) j["byte_offset"] = *v.byte_offset;
}

std::string report_to_jsonl(const ValidationReport& report) {
  std::string out;
  for (const auto& v : report) {
    out += json(v).dump();
    out += '\n';
  }
  return out;
}

ValidationReport validate_dump(const TensorDump& dump) {
  ValidationReport report;
  const SampleMeta& m = dump.meta;
  auto add = [&](std::string code, std::string tensor, std::string msg,
                 std::optional<int64_t> index = std::nullopt) {
    report.push_back({std::move(code), std::move(tensor), std::move(msg), index, std::nullopt});
  };

  const std::pair<const char*, int64_t> positive_fields[] = {
      {"n_visual", m.n_visual}, {"n_text", m.n_text},       {"grid_h", m.grid_h},
      {"grid_w", m.grid_w},     {"d_llm", m.d_llm},         {"d_enc", m.d_enc},
      {"d_key", m.d_key},       {"heads_llm", m.heads_llm}, {"heads_enc", m.heads_enc},
      {"head_dim_llm", m.head_dim_llm}};
  for (const auto& [field, value] : positive_fields) {
    if (value <= 0) add("meta_nonpositive", "", std::string("meta.") + field + " must be positive");
  }
  if (m.n_sys < 0) add("meta_nonpositive", "", "meta.n_sys must be non-negative");
  if (m.grid_h * m.grid_w != m.n_visual) {
    add("grid_mismatch", "",
        "grid mismatch: grid_h*grid_w = " + std::to_string(m.grid_h * m.grid_w) +
            " but n_visual = " + std::to_string(m.n_visual));
  }
  if (m.heads_llm * m.head_dim_llm != m.d_llm) {
    add("head_geometry_mismatch", "", "d_llm != heads_llm * head_dim_llm");
  }

  for (const auto& [key, t] : dump.tensors) {
    if (key != t.name) {
      add("name_mismatch", key, "table key '" + key + "' holds tensor named '" + t.name + "'");
    }
    if (t.dims.empty()) {
      add("empty_dims", key, "tensor has no dims");
      continue;
    }
    if (std::any_of(t.dims.begin(), t.dims.end(), [](int64_t d) { return d <= 0; })) {
      add("bad_dims", key, "non-positive dim in " + dims_str(t.dims));
      continue;
    }
    if (t.numel() != t.data.size()) {
      add("size_mismatch", key,
          "product of dims " + dims_str(t.dims) + " = " + std::to_string(t.numel()) +
              " but data holds " + std::to_string(t.data.size()) + " values");
      continue;
    }
    auto bad = std::find_if(t.data.begin(), t.data.end(), [](float f) { return !std::isfinite(f); });
    if (bad != t.data.end()) {
      add("non_finite", key, "non-finite value", bad - t.data.begin());
      continue;
    }
    const auto expected = canonical_dims(key, m);
    if (!expected.empty() && expected != t.dims) {
      add("dim_mismatch", key, "dims " + dims_str(t.dims) + " do not match meta, expected " +
                                   dims_str(expected));
      continue;
    }

    if (key == names::kEncAttn || key == names::kScapAttnBlock) {
      auto neg = std::find_if(t.data.begin(), t.data.end(), [](float f) { return f < 0.0f; });
      if (neg != t.data.end()) add("negative_attention", key, "negative attention weight", neg - t.data.begin());
    }
    if (key == names::kEncAttn) {
      const std::size_t cols = static_cast<std::size_t>(t.dims.back());
      const std::size_t rows = t.data.size() / cols;
      const std::size_t per_head = static_cast<std::size_t>(t.dims[1]);
      for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) sum += t.data[r * cols + c];
        if (std::abs(sum - 1.0) > kAttentionRowTolerance) {
          add("row_not_stochastic", key,
              "head " + std::to_string(r / per_head) + " row " + std::to_string(r % per_head) +
                  " sums to " + std::to_string(sum),
              static_cast<int64_t>(r));
        }
      }
    }
  }

  const bool has_q = dump.has(names::kScapQ);
  const bool has_k = dump.has(names::kScapK);
  if (!dump.has(names::kScapAttnBlock)) {
    if (!has_q && !has_k) {
      add("missing_scap_inputs", "", "need scap_attn_block or both scap_q and scap_k");
    } else if (has_q != has_k) {
      add("incomplete_scap_qk", has_q ? names::kScapK : names::kScapQ,
          "scap_q and scap_k must be provided together");
    }
  }
  return report;
}

DumpError::DumpError(const std::string& what, std::string tensor, uint64_t offset)
    : ValidationError(what + (tensor.empty() ? "" : " [tensor '" + tensor + "']") + " at byte " +
                      std::to_string(offset)),
      tensor_(std::move(tensor)),
      offset_(offset) {}

std::string encode_container(const Container& c) {
  json directory = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    if (t.numel() != t.data.size() || t.dims.empty()) {
      throw ValidationError("tensor '" + name + "' dims " + dims_str(t.dims) +
                            " inconsistent with data size");
    }
    const uint64_t nbytes = t.data.size() * sizeof(float);
    directory.push_back(
        json{{"name", name}, {"dtype", "f32"}, {"dims", t.dims}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  json header{{"meta", c.meta}, {"tensors", directory}};
  if (!c.attachments.is_null()) header["attachments"] = c.attachments;
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(kPreambleBytes + header_text.size() + offset);
  out.append(kMagic, sizeof kMagic);
  append_u64_le(out, header_text.size());
  out += header_text;
  for (const auto& [name, t] : c.tensors) append_f32_le(out, t.data);
  return out;
}

Container decode_container(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic) throw DumpError("truncated file: no magic", "", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw DumpError("bad magic", "", 0);
  if (bytes.size() < kPreambleBytes) {
    throw DumpError("truncated file: no header length", "", bytes.size());
  }
  const uint64_t header_len = read_u64_le(bytes, 4);
  if (header_len > bytes.size() - kPreambleBytes) {
    throw DumpError("truncated file: header length " + std::to_string(header_len) +
                        " exceeds file size",
                    "", 4);
  }
  const uint64_t payload_base = kPreambleBytes + header_len;

  json header;
  try {
    header = json::parse(bytes.begin() + kPreambleBytes, bytes.begin() + static_cast<std::ptrdiff_t>(payload_base));
  } catch (const json::parse_error& e) {
    throw DumpError(std::string("malformed header: ") + e.what(), "", kPreambleBytes + e.byte);
  }

  Container c;
  try {
    if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
      throw DumpError("header lacks tensor directory", "", kPreambleBytes);
    }
    c.meta = header.value("meta", json::object());
    if (header.contains("attachments")) c.attachments = header["attachments"];

    const uint64_t payload_size = bytes.size() - payload_base;
    for (const auto& entry : header["tensors"]) {
      Tensor t;
      t.name = entry.at("name").get<std::string>();
      if (c.tensors.contains(t.name)) throw DumpError("duplicate tensor", t.name, kPreambleBytes);
      const auto dtype = entry.at("dtype").get<std::string>();
      if (dtype != "f32") throw DumpError("unsupported dtype '" + dtype + "'", t.name, kPreambleBytes);
      t.dims = entry.at("dims").get<std::vector<int64_t>>();
      const uint64_t offset = entry.at("offset").get<uint64_t>();
      const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
      if (t.dims.empty() ||
          std::any_of(t.dims.begin(), t.dims.end(), [](int64_t d) { return d <= 0; })) {
        throw DumpError("bad dims " + dims_str(t.dims), t.name, payload_base + offset);
      }
      if (nbytes != t.numel() * sizeof(float)) {
        throw DumpError("dim mismatch: dims " + dims_str(t.dims) + " need " +
                            std::to_string(t.numel() * sizeof(float)) + " bytes, directory says " +
                            std::to_string(nbytes),
                        t.name, payload_base + offset);
      }
      if (offset > payload_size || nbytes > payload_size - offset) {
        throw DumpError("truncated payload", t.name, payload_base + std::min(offset, payload_size));
      }
      t.data = read_f32_le(bytes, payload_base + offset, t.numel());
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
          throw DumpError("non-finite value", t.name, payload_base + offset + i * sizeof(float));
        }
      }
      c.payload_offsets[t.name] = payload_base + offset;
      c.tensors.emplace(t.name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw DumpError(std::string("malformed header: ") + e.what(), "", kPreambleBytes);
  }
  return c;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  write_file(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) { return decode_container(read_file(path)); }

std::string encode_dump(const TensorDump& dump) {
  const auto report = validate_dump(dump);
  if (!report.empty()) {
    const auto& v = report.front();
    throw ValidationError("invalid dump: " + v.message + (v.tensor.empty() ? "" : " [tensor '" + v.tensor + "']"));
  }
  Container c;
  c.meta = dump.meta;
  c.tensors = dump.tensors;
  return encode_container(c);
}

TensorDump decode_dump(const std::string& bytes) {
  Container c = decode_container(bytes);
  TensorDump dump;
  try {
    dump.meta = c.meta.get<SampleMeta>();
  } catch (const nlohmann::json::exception& e) {
    throw DumpError(std::string("malformed meta: ") + e.what(), "", kPreambleBytes);
  }
  dump.tensors = std::move(c.tensors);

  const auto report = validate_dump(dump);
  if (!report.empty()) {
    const Violation& v = report.front();
    uint64_t offset = kPreambleBytes;
    if (auto it = c.payload_offsets.find(v.tensor); it != c.payload_offsets.end()) {
      offset = it->second;
      if (v.index) {
        const auto& t = dump.tensors.at(v.tensor);
        const uint64_t element =
            v.code == "row_not_stochastic" ? static_cast<uint64_t>(*v.index) * t.dims.back()
                                           : static_cast<uint64_t>(*v.index);
        offset += element * sizeof(float);
      }
    }
    throw DumpError(v.message, v.tensor, offset);
  }
  return dump;
}

TensorDump read_dump(const std::filesystem::path& path) { return decode_dump(read_file(path)); }

void write_dump(const TensorDump& dump, const std::filesystem::path& path) {
  write_file(path, encode_dump(dump));
}

}  // namespace cdrop
