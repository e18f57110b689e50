#pragma once

// Streaming runs over a token file: model activations are produced window by
// window and folded into the statistics in stream order, so results depend
// only on the inputs, never on the worker count.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unrn/corr.hpp"
#include "unrn/forward.hpp"
#include "unrn/neuron_stats.hpp"
#include "unrn/taxonomy.hpp"

namespace unrn {

// tokens x (n_layer * d_mlp) activations of one window, layer-major.
// kind is Hook::mlp_pre or Hook::mlp_post.
Matrix neuron_activations(const ModelWeights& w, std::span<const std::uint32_t> tokens,
                          Hook kind);

// Checks that the stream fits the model (ids and context length).
void check_stream_fits(const ModelWeights& w, const TokenStream& s);

struct CorrelateOptions {
  std::uint64_t baseline_seed = 0;
  // Overrides the Gaussian rotation drawn from baseline_seed.
  std::optional<RotationBaseline> rotation;
  std::size_t tile_size = 64;
  int workers = 1;
  std::size_t batch_windows = 64;  // windows per activation batch
};

struct CorrelateResult {
  MatrixD corr;      // N_A x N_B
  MatrixD baseline;  // N_A x N_B against rotated model-B activations
  std::uint64_t n_tokens = 0;  // masked-in tokens
  std::size_t n_windows = 0;
  std::uint64_t baseline_seed = 0;
};

// Correlates post-activations of model a with those of model b (and of b
// under the rotation baseline) over every masked-in token.
CorrelateResult correlate_models(const ModelWeights& a, const ModelWeights& b,
                                 const MaskedTokens& data, const CorrelateOptions& opts = {});

// Pre-activation moments of every neuron over masked-in tokens.
ActivationMoments activation_moments(const ModelWeights& w, const MaskedTokens& data,
                                     int workers = 1, std::size_t batch_windows = 64);

struct ExplainOptions {
  PositionMiOptions mi;
  std::size_t max_mi_windows = 4096;  // full-length windows kept for position MI
  int workers = 1;
  std::size_t batch_windows = 64;
};

struct ExplainResult {
  std::vector<std::vector<RivResult>> riv;  // [test][neuron]
  std::vector<PositionMiResult> position;   // per neuron; empty when too few windows
  std::uint64_t n_tokens = 0;
  std::size_t n_mi_windows = 0;
};

// labels[k] holds one label per stream token for test k. Post-activations
// are scored against each label stream; masked-out tokens are ignored.
ExplainResult explain_neurons(const ModelWeights& w, const MaskedTokens& data,
                              std::span<const std::vector<std::uint8_t>> labels,
                              const ExplainOptions& opts = {});

}  // namespace unrn
