#pragma once

// Binary file formats shared by every analysis and by the checkpoint
// converter. All integers and floats are little-endian.
//
//   tensor:  "UNRN" u32 version u32 dtype u32 ndim  ndim x u64 dim  f32 data
//   tokens:  "UNTK" u32 version u32 context_length  { u32 len, len x u32 id }*
//   labels:  "UNLB" u32 version u64 count  count x u8 (0 or 1)
//
// Exclusion ids are kept in JSON:
//   { "excluded_token_ids": [..], "bos_token_id": n, "pad_token_id": n,
//     "newline_token_id": n }
// where the named ids are optional and are merged into the excluded set.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "unrn/common.hpp"

namespace unrn {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint32_t kDtypeF32 = 1;

struct Tensor {
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::uint64_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {}

  std::uint64_t numel() const;
  bool operator==(const Tensor&) const = default;
};

// Throws DataError when shape and data disagree or a dimension is zero.
void validate(const Tensor& t);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

Tensor to_tensor(const Matrix& m);
Matrix to_matrix(const Tensor& t);

struct TokenStream {
  std::uint32_t context_length = 0;
  std::vector<std::uint32_t> tokens;
  // doc_offsets[i] is the index of document i's first token; the final entry
  // equals tokens.size().
  std::vector<std::uint64_t> doc_offsets{0};

  std::size_t num_documents() const { return doc_offsets.size() - 1; }
  std::span<const std::uint32_t> document(std::size_t i) const;
  void add_document(std::span<const std::uint32_t> ids);
};

struct ExclusionSet {
  std::set<std::uint32_t> excluded_token_ids;
  std::optional<std::uint32_t> bos_token_id;

  bool contains(std::uint32_t id) const {
    return excluded_token_ids.count(id) != 0;
  }
};

ExclusionSet read_exclusions(const std::filesystem::path& path);
void write_exclusions(const ExclusionSet& ex, const std::filesystem::path& path);

std::vector<std::uint8_t> encode_token_stream(const TokenStream& s);
TokenStream decode_token_stream(std::span<const std::uint8_t> bytes,
                                std::optional<std::uint32_t> d_vocab = {});

void write_token_stream(const TokenStream& s, const std::filesystem::path& path);

struct MaskedTokens {
  TokenStream stream;
  // 1 where the token participates in statistics, 0 where excluded.
  std::vector<std::uint8_t> mask;
};

// Throws DataError on truncated records or ids >= d_vocab (when given).
MaskedTokens read_token_stream(const std::filesystem::path& path,
                               const ExclusionSet& exclusions,
                               std::optional<std::uint32_t> d_vocab = {});

std::vector<std::uint8_t> exclusion_mask(const TokenStream& s,
                                         const ExclusionSet& exclusions);

std::vector<std::uint8_t> encode_labels(std::span<const std::uint8_t> labels);
std::vector<std::uint8_t> decode_labels(std::span<const std::uint8_t> bytes);

void write_labels(std::span<const std::uint8_t> labels,
                  const std::filesystem::path& path);
std::vector<std::uint8_t> read_labels(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(std::span<const std::uint8_t> bytes,
                      const std::filesystem::path& path);

// A contiguous run of at most context_length tokens from one document.
struct Window {
  std::size_t document = 0;
  std::size_t begin = 0;  // absolute index into TokenStream::tokens
  std::size_t length = 0;
};

// Splits each document into consecutive windows of context_length tokens;
// the last window of a document may be shorter.
std::vector<Window> make_windows(const TokenStream& s);

}  // namespace unrn
