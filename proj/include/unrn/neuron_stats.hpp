#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "unrn/common.hpp"
#include "unrn/model.hpp"

namespace unrn {

// Streaming central moments of one scalar variable. Batches are folded in
// with the pairwise merge formulas, so update/merge order only perturbs the
// result at rounding level.
struct MomentState {
  std::uint64_t count = 0;
  double mean = 0.0;
  double m2 = 0.0;  // sum of (x - mean)^2
  double m3 = 0.0;
  double m4 = 0.0;
  std::uint64_t positives = 0;  // samples > 0

  void add(double x);
  void merge(const MomentState& other);

  // Central moments of a batch computed two-pass, then merged.
  static MomentState of(std::span<const double> xs);
};

struct Moments {
  double mean = kUndefined;
  double variance = kUndefined;  // population variance m2 / n
  double skew = kUndefined;      // (m3/n) / (m2/n)^1.5
  double kurtosis = kUndefined;  // (m4/n) / (m2/n)^2, not excess: Gaussian = 3
  double sparsity = kUndefined;  // positives / count
};

// Zero variance leaves skew and kurtosis undefined.
Moments finalize(const MomentState& s);

// Two-pass moments of a vector, same conventions as finalize().
Moments vector_moments(std::span<const double> xs);

// One MomentState per neuron over pre-activations.
class ActivationMoments {
 public:
  explicit ActivationMoments(std::size_t n_neurons) : states_(n_neurons) {}

  // batch: tokens x neurons; rows with mask 0 are skipped. Each column is
  // reduced two-pass and merged into its state.
  void update(const Matrix& batch, std::span<const std::uint8_t> mask, int workers = 1);
  void merge(const ActivationMoments& other);

  const std::vector<MomentState>& states() const { return states_; }

 private:
  std::vector<MomentState> states_;
};

struct WeightSummary {
  int layer = 0;
  int index = 0;
  double b_in = 0.0;
  double cos_in_out = kUndefined;
  double weight_penalty = 0.0;    // |w_in|^2 + |w_out|^2
  double w_out_norm = 0.0;
  // Moments of cos(w_out, W_U[:, v]) over the vocabulary.
  double vocab_var = kUndefined;
  double vocab_skew = kUndefined;
  double vocab_kurt = kUndefined;
  // Variance over the vocabulary of the logit effect W_U^T w_out.
  double logit_var = kUndefined;
};

double cosine(std::span<const float> a, std::span<const float> b);

// Static statistics for every neuron, layer-major order.
std::vector<WeightSummary> weight_summaries(const ModelWeights& w, int workers = 1);

// cos(w_out, W_U[:, v]) for every vocabulary item v.
std::vector<double> vocab_cosines(const ModelWeights& w, int layer, int neuron);
// W_U^T w_out.
std::vector<double> logit_effect(const ModelWeights& w, int layer, int neuron);

class LayerPercentileTable {
 public:
  void add(int layer, const std::string& metric, double value);
  // Sorts every column; NaNs are dropped.
  void build();

  // 100 * (# same-layer values strictly below value) / (# values).
  // Throws DataError for an unknown (layer, metric).
  double percentile(int layer, const std::string& metric, double value) const;

 private:
  std::map<std::pair<int, std::string>, std::vector<double>> values_;
};

}  // namespace unrn
