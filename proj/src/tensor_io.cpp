#include "unrn/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace unrn {
namespace {

constexpr char kTensorMagic[4] = {'U', 'N', 'R', 'N'};
constexpr char kTokenMagic[4] = {'U', 'N', 'T', 'K'};
constexpr char kLabelMagic[4] = {'U', 'N', 'L', 'B'};

// Guards against absurd headers before allocating.
constexpr std::uint32_t kMaxDims = 16;

class ByteWriter {
 public:
  void magic(const char (&m)[4]) {
    for (char c : m) out_.push_back(static_cast<std::uint8_t>(c));
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void reserve(std::size_t n) { out_.reserve(n); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_magic(const char (&m)[4], const char* what) {
    need(4, what);
    if (std::memcmp(bytes_.data() + pos_, m, 4) != 0) {
      throw DataError(std::string("bad magic in ") + what);
    }
    pos_ += 4;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

 private:
  void need(std::size_t n, const char* what) const {
    if (remaining() < n) throw DataError(std::string("truncated ") + what);
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void check_version(std::uint32_t v, const char* what) {
  if (v != kFormatVersion) {
    throw DataError(std::string("unsupported ") + what + " version " + std::to_string(v));
  }
}

}  // namespace

std::uint64_t Tensor::numel() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void validate(const Tensor& t) {
  if (t.shape.empty()) throw DataError("tensor has no dimensions");
  for (auto d : t.shape) {
    if (d == 0) throw DataError("tensor dimension of size 0");
  }
  if (t.numel() != t.data.size()) {
    throw DataError("tensor shape/data mismatch: shape holds " +
                    std::to_string(t.numel()) + " scalars, data has " +
                    std::to_string(t.data.size()));
  }
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  validate(t);
  ByteWriter w;
  w.reserve(16 + 8 * t.shape.size() + 4 * t.data.size());
  w.magic(kTensorMagic);
  w.u32(kFormatVersion);
  w.u32(kDtypeF32);
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (auto d : t.shape) w.u64(d);
  for (float v : t.data) w.f32(v);
  return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kTensorMagic, "tensor header");
  check_version(r.u32("tensor header"), "tensor");
  const auto dtype = r.u32("tensor header");
  if (dtype != kDtypeF32) throw DataError("unsupported tensor dtype " + std::to_string(dtype));
  const auto ndim = r.u32("tensor header");
  if (ndim == 0 || ndim > kMaxDims) throw DataError("bad tensor rank " + std::to_string(ndim));
  Tensor t;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const auto d = r.u64("tensor header");
    if (d == 0) throw DataError("tensor dimension of size 0");
    t.shape.push_back(d);
  }
  const auto n = t.numel();
  if (r.remaining() != n * 4) {
    throw DataError("tensor shape/data mismatch: expected " + std::to_string(n) +
                    " scalars, payload holds " + std::to_string(r.remaining() / 4.0));
  }
  t.data.resize(n);
  for (auto& v : t.data) v = r.f32("tensor payload");
  return t;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw DataError("failed reading " + path.string());
  }
  return bytes;
}

void write_file_bytes(std::span<const std::uint8_t> bytes,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  write_file_bytes(encode_tensor(t), path);
}

Tensor read_tensor(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Tensor to_tensor(const Matrix& m) {
  return Tensor({m.rows, m.cols}, m.data);
}

Matrix to_matrix(const Tensor& t) {
  validate(t);
  if (t.shape.size() != 2) throw DataError("expected a 2-d tensor");
  Matrix m;
  m.rows = t.shape[0];
  m.cols = t.shape[1];
  m.data = t.data;
  return m;
}

std::span<const std::uint32_t> TokenStream::document(std::size_t i) const {
  return std::span<const std::uint32_t>(tokens).subspan(
      doc_offsets[i], doc_offsets[i + 1] - doc_offsets[i]);
}

void TokenStream::add_document(std::span<const std::uint32_t> ids) {
  tokens.insert(tokens.end(), ids.begin(), ids.end());
  doc_offsets.push_back(tokens.size());
}

ExclusionSet read_exclusions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  ExclusionSet ex;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.contains("excluded_token_ids")) {
      for (const auto& id : j.at("excluded_token_ids")) {
        ex.excluded_token_ids.insert(id.get<std::uint32_t>());
      }
    }
    for (const char* key : {"bos_token_id", "pad_token_id", "newline_token_id"}) {
      if (j.contains(key) && !j.at(key).is_null()) {
        ex.excluded_token_ids.insert(j.at(key).get<std::uint32_t>());
      }
    }
    if (j.contains("bos_token_id") && !j.at("bos_token_id").is_null()) {
      ex.bos_token_id = j.at("bos_token_id").get<std::uint32_t>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return ex;
}

void write_exclusions(const ExclusionSet& ex, const std::filesystem::path& path) {
  nlohmann::json j;
  j["excluded_token_ids"] = std::vector<std::uint32_t>(ex.excluded_token_ids.begin(),
                                                       ex.excluded_token_ids.end());
  if (ex.bos_token_id) j["bos_token_id"] = *ex.bos_token_id;
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<std::uint8_t> encode_token_stream(const TokenStream& s) {
  ByteWriter w;
  w.reserve(12 + 4 * (s.tokens.size() + s.num_documents()));
  w.magic(kTokenMagic);
  w.u32(kFormatVersion);
  w.u32(s.context_length);
  for (std::size_t d = 0; d < s.num_documents(); ++d) {
    const auto doc = s.document(d);
    w.u32(static_cast<std::uint32_t>(doc.size()));
    for (auto id : doc) w.u32(id);
  }
  return w.take();
}

TokenStream decode_token_stream(std::span<const std::uint8_t> bytes,
                                std::optional<std::uint32_t> d_vocab) {
  ByteReader r(bytes);
  r.expect_magic(kTokenMagic, "token header");
  check_version(r.u32("token header"), "token stream");
  TokenStream s;
  s.context_length = r.u32("token header");
  if (s.context_length == 0) throw DataError("token stream context_length is 0");
  while (!r.at_end()) {
    const auto len = r.u32("token record");
    if (r.remaining() < std::size_t{len} * 4) throw DataError("truncated token record");
    for (std::uint32_t i = 0; i < len; ++i) {
      const auto id = r.u32("token record");
      if (d_vocab && id >= *d_vocab) {
        throw DataError("token id " + std::to_string(id) + " >= d_vocab " +
                        std::to_string(*d_vocab));
      }
      s.tokens.push_back(id);
    }
    s.doc_offsets.push_back(s.tokens.size());
  }
  return s;
}

void write_token_stream(const TokenStream& s, const std::filesystem::path& path) {
  write_file_bytes(encode_token_stream(s), path);
}

std::vector<std::uint8_t> exclusion_mask(const TokenStream& s,
                                         const ExclusionSet& exclusions) {
  std::vector<std::uint8_t> mask(s.tokens.size());
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    mask[i] = exclusions.contains(s.tokens[i]) ? 0 : 1;
  }
  return mask;
}

MaskedTokens read_token_stream(const std::filesystem::path& path,
                               const ExclusionSet& exclusions,
                               std::optional<std::uint32_t> d_vocab) {
  MaskedTokens out;
  try {
    out.stream = decode_token_stream(read_file_bytes(path), d_vocab);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  out.mask = exclusion_mask(out.stream, exclusions);
  return out;
}

std::vector<std::uint8_t> encode_labels(std::span<const std::uint8_t> labels) {
  ByteWriter w;
  w.reserve(16 + labels.size());
  w.magic(kLabelMagic);
  w.u32(kFormatVersion);
  w.u64(labels.size());
  for (auto v : labels) {
    if (v > 1) throw DataError("label value " + std::to_string(v) + " is not 0 or 1");
    w.u8(v);
  }
  return w.take();
}

std::vector<std::uint8_t> decode_labels(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic(kLabelMagic, "label header");
  check_version(r.u32("label header"), "label stream");
  const auto n = r.u64("label header");
  if (r.remaining() != n) throw DataError("label count/payload mismatch");
  std::vector<std::uint8_t> labels(n);
  for (auto& v : labels) {
    v = r.u8("label payload");
    if (v > 1) throw DataError("label value " + std::to_string(v) + " is not 0 or 1");
  }
  return labels;
}

void write_labels(std::span<const std::uint8_t> labels,
                  const std::filesystem::path& path) {
  write_file_bytes(encode_labels(labels), path);
}

std::vector<std::uint8_t> read_labels(const std::filesystem::path& path) {
  try {
    return decode_labels(read_file_bytes(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::vector<Window> make_windows(const TokenStream& s) {
  std::vector<Window> windows;
  const std::size_t ctx = s.context_length;
  for (std::size_t d = 0; d < s.num_documents(); ++d) {
    const std::size_t begin = s.doc_offsets[d];
    const std::size_t end = s.doc_offsets[d + 1];
    for (std::size_t b = begin; b < end; b += ctx) {
      windows.push_back({d, b, std::min(ctx, end - b)});
    }
  }
  return windows;
}

}  // namespace unrn
