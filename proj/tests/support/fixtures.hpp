#pragma once

// Shared test fixtures: temporary directories, random models and streams,
// hand-built toy models, and a double-precision reference forward pass that
// is written independently of the library's forward().

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "unrn/forward.hpp"
#include "unrn/model.hpp"
#include "unrn/tensor_io.hpp"

namespace fixtures {

using namespace unrn;

class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

ModelConfig tiny_config(int n_layer = 2, int n_head = 2, int d_model = 16, int d_mlp = 32,
                        int d_vocab = 24, int n_ctx = 32);

// Random weights with non-trivial layer norms and biases everywhere.
ModelWeights random_full_model(const ModelConfig& cfg, std::uint64_t seed);

// Documents start with bos and continue with uniform ids in [first_id, d_vocab).
TokenStream random_stream(std::size_t n_docs, std::size_t doc_len, std::uint32_t context_length,
                          std::uint32_t d_vocab, std::uint64_t seed, std::uint32_t bos = 0,
                          std::uint32_t first_id = 1);

MaskedTokens all_in(TokenStream s);

std::vector<double> gaussian(std::size_t n, std::uint64_t seed, double mean = 0.0,
                             double std = 1.0);

// Textbook two-pass Pearson correlation.
double pearson(std::span<const double> x, std::span<const double> y);

// --------------------------------------------------------------- toys

// Two-layer, one-head model in which neuron L0.0 fires at a constant positive
// value and writes along the direction its downstream head L1.H0 uses to
// attend to BOS (token 0). The BOS value vector is zero.
ModelWeights path_toy_model(std::uint64_t seed);

// Random model in which neuron (n_layer-1).0 is the only writer along a
// zero-mean direction orthogonal to every unembedding column.
ModelWeights entropy_toy_model(std::uint64_t seed);

// Like entropy_toy_model, but neurons (n_layer-1).0 and (n_layer-1).1 share
// their input weights and write opposite outputs.
ModelWeights antipodal_toy_model(std::uint64_t seed);

// --------------------------------------------------------- reference

struct RefTrace {
  // [layer][head] -> T*T pattern and T*d_model head output.
  std::vector<std::vector<std::vector<double>>> pattern, head_out;
  std::vector<std::vector<double>> mlp_pre, mlp_post;  // [layer] -> T*d_mlp
  std::vector<double> ln_scale;                        // T
  std::vector<std::vector<double>> logits;             // T x d_vocab
};

struct RefEdit {
  std::optional<FixNeuron> fix;
  // Query input of the head at these positions has the source neuron's
  // contribution subtracted before the layer norm.
  std::optional<PathAblate> ablate;
};

RefTrace reference_forward(const ModelWeights& w, std::span<const std::uint32_t> tokens,
                           const RefEdit& edit = {});

std::vector<double> softmax(std::span<const double> logits);

}  // namespace fixtures
