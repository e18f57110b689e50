#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unrn/common.hpp"
#include "unrn/model.hpp"
#include "unrn/tensor_io.hpp"

namespace unrn {

// ---------------------------------------------------------------- vocabulary

// Token strings with leading spaces as literal ' ' characters.
// File format: { "tokens": ["<s>", " the", ",", ...] }.
struct Vocabulary {
  std::vector<std::string> tokens;

  static Vocabulary read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
  std::size_t size() const { return tokens.size(); }
  const std::string& text(std::uint32_t id) const;
  // Index of the token whose text equals s exactly, or -1.
  std::int64_t find(const std::string& s) const;
};

// Token predicates usable in token_property labels. `argument` is a single
// character for contains_char / starts_with_letter and ignored otherwise.
bool token_predicate(const std::string& predicate, const std::string& argument,
                     const std::string& token);
const std::vector<std::string>& known_predicates();

// --------------------------------------------------------------- label specs

enum class PositionClass { any, standalone_word, word_start, word_middle };

std::string position_class_name(PositionClass p);
PositionClass parse_position_class(const std::string& s);

struct LabelSpec {
  enum class Kind { token_property, unigram, previous_token, external };

  Kind kind = Kind::token_property;
  std::string id;
  std::string predicate;  // token_property
  std::string argument;   // token_property
  std::string target;     // unigram: compared after stripping one leading space, case-insensitive
  PositionClass position = PositionClass::any;
  std::shared_ptr<const LabelSpec> inner;  // previous_token
  std::filesystem::path path;              // external label file

  static LabelSpec property(std::string predicate, std::string argument = {});
  static LabelSpec unigram(std::string target, PositionClass p);
  static LabelSpec previous(LabelSpec inner);
  static LabelSpec external(std::filesystem::path path);
};

// A token starts a word at the start of its document, when it begins with a
// space or a non-letter, or when the previous token does not end in a letter.
// Otherwise it continues the previous token's word.
bool starts_word(const TokenStream& s, const Vocabulary& v, std::size_t doc, std::size_t pos);

// One label per token of the stream. previous_token labels are shifted one
// position within each document; a document's first token gets 0.
// Throws DataError for an unknown unigram/predicate or an external file whose
// length differs from the stream.
std::vector<std::uint8_t> generate_labels(const LabelSpec& spec, const TokenStream& s,
                                          const Vocabulary& v);

// Reads a JSON suite: { "tests": [ {...}, ... ] }. External paths are
// resolved relative to the suite file.
std::vector<LabelSpec> read_test_suite(const std::filesystem::path& path);
void write_test_suite(std::span<const LabelSpec> specs, const std::filesystem::path& path);

// Alphabet letters x 3 position classes, token predicates, punctuation,
// the top_k most frequent alphabetic unigrams of the stream, and
// previous-token variants of the property and unigram tests.
std::vector<LabelSpec> default_test_suite(const Vocabulary& v, const TokenStream& s,
                                          int top_k_unigrams = 40);

// ------------------------------------------------- reduction in variance

struct VarianceStats {
  std::uint64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;  // sum of squared deviations

  double variance() const { return n == 0 ? 0.0 : m2 / static_cast<double>(n); }
};

struct RivResult {
  double score = kUndefined;  // 1 - ((1-beta) var0 + beta var1) / var
  double beta = 0.0;          // fraction of positive labels
  double var_total = kUndefined;
  double var_negative = 0.0;
  double var_positive = 0.0;
  std::uint64_t n_negative = 0;
  std::uint64_t n_positive = 0;
  bool degenerate = false;  // a class had fewer than 2 tokens; its variance is 0
};

// Masked-out tokens are ignored. Zero total variance gives an undefined score.
RivResult reduction_in_variance(std::span<const float> activations,
                                std::span<const std::uint8_t> labels,
                                std::span<const std::uint8_t> mask);

// Same score from the total and positive-class statistics; the negative class
// is recovered by removing the positive class from the total.
RivResult riv_from_partition(const VarianceStats& total, const VarianceStats& positive);

VarianceStats variance_stats(std::span<const double> xs);

// ------------------------------------------------ position mutual information

struct PositionMiOptions {
  int activation_bins = 16;  // equal-mass
  int position_bins = 32;    // equal-width over context positions
};

struct PositionMiResult {
  double mi = kUndefined;  // nats
  std::vector<double> mean_by_position;
  std::vector<double> std_by_position;
};

// activations: windows x context_length, one row per full window.
// Throws DataError when there are fewer windows than activation bins or
// fewer positions than position bins.
PositionMiResult position_mutual_information(const Matrix& activations,
                                             const PositionMiOptions& opts = {});

// ------------------------------------------------------------ vocab effects

enum class VocabClass { prediction, suppression, partition, none };

std::string vocab_class_name(VocabClass c);

struct VocabEffectThresholds {
  double kurtosis = 10.0;
  double variance_cutoff = std::numeric_limits<double>::infinity();
};

struct VocabEffectClass {
  VocabClass cls = VocabClass::none;
  double variance = kUndefined;
  double skew = kUndefined;
  double kurtosis = kUndefined;
  VocabEffectThresholds thresholds;
};

// kurtosis > K: prediction if skew > 0, suppression if skew < 0.
// Otherwise partition when variance > variance_cutoff.
VocabEffectClass classify_vocab_effect(std::span<const double> effect,
                                       const VocabEffectThresholds& thresholds = {});

// ------------------------------------------------------- weight neighbours

enum class WeightBasis { input, output };

struct NeighborResult {
  double max_cos = kUndefined;
  std::int64_t argmax = -1;
  double min_cos = kUndefined;
  std::int64_t argmin = -1;
};

// For every neuron (layer-major), the most and least similar other neuron in
// the same model by cosine of input or output weights. Zero-norm neurons get
// undefined results and are skipped as partners.
std::vector<NeighborResult> nearest_weight_neighbor(const ModelWeights& w, WeightBasis basis,
                                                    int workers = 1);

}  // namespace unrn
