#pragma once

// Causal experiments on single neurons: fixing a neuron's activation over a
// value grid and reading the final layer-norm scale and next-token entropy,
// the BOS heuristic score of a neuron for a downstream head, per-head value
// norm ratios, and neuron-to-head path ablations.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "unrn/common.hpp"
#include "unrn/forward.hpp"
#include "unrn/model.hpp"
#include "unrn/tensor_io.hpp"

namespace unrn {

// "lo:hi:n" gives n evenly spaced points from lo to hi; "a,b,c" gives the
// listed values. The result is sorted ascending. Throws DataError on a
// malformed or non-finite spec.
std::vector<double> parse_value_grid(const std::string& spec);

// Windows from a masked stream, at most max_windows (0 means all), in
// stream order.
std::vector<Window> select_windows(const TokenStream& s, std::size_t max_windows);

// --------------------------------------------------------------- entropy

struct EntropyPoint {
  double value = 0.0;
  double ln_scale = kUndefined;        // mean final layer-norm scale
  double entropy = kUndefined;         // mean next-token entropy, nats
  double loss = kUndefined;            // mean next-token loss
  double reciprocal_rank = kUndefined; // mean 1 / rank of the true next token
  double reciprocal_rank_shift = kUndefined;  // minus the clean value
  double argmax_agreement = kUndefined;       // fraction of positions whose argmax is unchanged
};

struct EntropyCurve {
  NeuronId neuron;
  EntropyPoint clean;  // value field unused
  std::vector<EntropyPoint> points;
};

struct EntropyOptions {
  std::vector<double> grid = parse_value_grid("-2:10:11");
  int n_controls = 20;
  std::uint64_t seed = 0;
  std::size_t max_windows = 0;
  int workers = 1;
};

struct EntropyExperimentResult {
  std::vector<double> grid;
  EntropyCurve target;
  std::vector<EntropyCurve> controls;
};

// Runs the target neuron and its controls over the grid. Means are over
// masked-in positions; loss and rank also require the next token to be
// masked in. Throws DataError for an out-of-range neuron.
EntropyExperimentResult entropy_intervention(const ModelWeights& w, const MaskedTokens& data,
                                             NeuronId neuron, const EntropyOptions& opts = {});

// One curve for a single neuron (no controls).
EntropyCurve entropy_curve(const ModelWeights& w, const MaskedTokens& data,
                           const std::vector<Window>& windows, NeuronId neuron,
                           std::span<const double> grid, int workers = 1);

// Control neurons from the final two layers, excluding the target, neurons in
// the top decile of weight-decay penalty and neurons in the bottom decile of
// logit-effect variance (deciles over the final-two-layer pool). Sampled
// without replacement with the given seed.
std::vector<NeuronId> select_control_neurons(const ModelWeights& w, NeuronId target, int count,
                                             std::uint64_t seed);

// -------------------------------------------------------- BOS heuristic

// Key of the BOS token at position 0 of a BOS-only context, for one head.
std::vector<double> bos_key(const ModelWeights& w, std::uint32_t bos_token, HeadId head);

// W_Q k_BOS in residual coordinates.
std::vector<double> bos_query_direction(const ModelWeights& w, std::uint32_t bos_token,
                                        HeadId head);

struct BosScoreEntry {
  NeuronId neuron;
  HeadId head;
  double score = 0.0;  // unit(w_out) . W_Q k_BOS
};

struct BosScoreTable {
  std::vector<BosScoreEntry> entries;
  // Scores of random unit directions, per head.
  std::map<HeadId, std::vector<double>> baseline;
  std::uint64_t seed = 0;
};

// Every (neuron, head) pair with neuron layer < head layer. Restricting
// `neurons` (non-empty) limits the table to those neurons.
BosScoreTable bos_heuristic_scores(const ModelWeights& w, std::uint32_t bos_token,
                                   std::span<const NeuronId> neurons = {},
                                   int n_baseline = 1000, std::uint64_t seed = 0);

// -------------------------------------------------------- BOS value norms

struct HeadValueNorm {
  HeadId head;
  double bos_norm = 0.0;         // |W_O v_BOS|
  double mean_other_norm = 0.0;  // mean |W_O v_s| over masked-in non-BOS tokens
  double ratio = kUndefined;     // mean_other_norm / bos_norm; +inf when bos_norm is 0
};

struct ValueNormReport {
  std::vector<HeadValueNorm> heads;
  double median_ratio = kUndefined;
};

ValueNormReport bos_value_norm_ratio(const ModelWeights& w, const MaskedTokens& data,
                                     std::uint32_t bos_token, std::size_t max_windows = 0,
                                     int workers = 1);

// --------------------------------------------------------- path ablation

struct PathSample {
  std::size_t window = 0;
  int position = 0;
  double activation = 0.0;  // source neuron post-activation
  double bos_attention_clean = 0.0;
  double bos_attention_ablated = 0.0;
  double od_norm_clean = 0.0;
  double od_norm_ablated = 0.0;

  double delta_bos_attention() const { return bos_attention_ablated - bos_attention_clean; }
  double delta_od_norm() const { return od_norm_ablated - od_norm_clean; }
};

struct PathAblationResult {
  NeuronId neuron;
  HeadId head;
  std::uint64_t seed = 0;
  std::vector<PathSample> samples;
  double fraction_bos_decrease = kUndefined;  // over samples with positive activation
  double fraction_norm_increase = kUndefined;
};

// Destinations are drawn without replacement from the second half of every
// window (positions >= length / 2, at least 1); BOS attention is the
// attention on source position 0. Throws DataError when the neuron does not
// precede the head or when no destination can be sampled.
PathAblationResult path_ablation(const ModelWeights& w, const MaskedTokens& data, NeuronId neuron,
                                 HeadId head, std::size_t n_samples, std::uint64_t seed = 0,
                                 int workers = 1);

}  // namespace unrn
