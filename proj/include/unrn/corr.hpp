#pragma once

// Streaming Pearson correlation between two neuron populations, the random
// rotation baseline, excess correlation and depth specialization.

#include <cstdint>
#include <span>
#include <vector>

#include "unrn/common.hpp"

namespace unrn {

// Running sums for every (a, b) neuron pair:
//   rho = (Sxy - Sx Sy / n) / sqrt((Sxx - Sx^2 / n)(Syy - Sy^2 / n))
// All accumulators are f64.
class CorrState {
 public:
  CorrState() = default;
  CorrState(std::size_t n_a, std::size_t n_b);

  // batch_a: tokens x N_A, batch_b: tokens x N_B, mask: one byte per token.
  // Rows with mask 0 are skipped. The cross matrix is updated in row tiles of
  // tile_size neurons spread over `workers` threads; every entry accumulates
  // tokens in stream order, so the result does not depend on workers.
  void update(const Matrix& batch_a, const Matrix& batch_b, std::span<const std::uint8_t> mask,
              int workers = 1, std::size_t tile_size = 64);

  // Equivalent to having streamed other's tokens after this state's tokens.
  void merge(const CorrState& other);

  std::uint64_t count() const { return n_; }
  std::size_t size_a() const { return sum_a_.size(); }
  std::size_t size_b() const { return sum_b_.size(); }

  const std::vector<double>& sum_a() const { return sum_a_; }
  const std::vector<double>& sumsq_a() const { return sumsq_a_; }
  const std::vector<double>& sum_b() const { return sum_b_; }
  const std::vector<double>& sumsq_b() const { return sumsq_b_; }
  const MatrixD& cross() const { return cross_; }

 private:
  std::uint64_t n_ = 0;
  std::vector<double> sum_a_, sumsq_a_, sum_b_, sumsq_b_;
  MatrixD cross_;
};

// N_A x N_B correlations clamped to [-1, 1]. Entries involving a neuron with
// zero variance are kUndefined (NaN). Throws NumericError if n < 2.
MatrixD corr_finalize(const CorrState& state);

// Per-layer d_mlp x d_mlp matrices R; a token's activations v in layer l are
// replaced by R_l v. Gaussian entries are i.i.d. N(0, 1) drawn from a
// generator seeded with (seed, layer).
struct RotationBaseline {
  std::uint64_t seed = 0;
  std::vector<Matrix> per_layer;

  static RotationBaseline gaussian(int n_layer, int d_mlp, std::uint64_t seed);
  static RotationBaseline identity(int n_layer, int d_mlp);

  // acts: tokens x (n_layer * d_mlp), layer-major neuron order.
  Matrix apply(const Matrix& acts) const;
};

struct UniversalityRecord {
  std::size_t neuron = 0;              // index in the reference model
  std::vector<double> max_corr;        // per comparison model
  std::vector<std::int64_t> argmax;    // per comparison model, -1 if undefined
  std::vector<double> baseline_max;    // per comparison model
  double mean_max = kUndefined;
  double mean_baseline = kUndefined;
  double excess = kUndefined;          // mean_max - mean_baseline
  double max_max = kUndefined;
  double min_max = kUndefined;
  bool is_universal = false;           // excess > threshold
};

// Max over each row (ties -> lowest column; NaN entries ignored).
std::vector<std::pair<double, std::int64_t>> row_max(const MatrixD& m);

// corr[m] and baseline[m] are reference x comparison-model matrices.
// Throws DataError for an empty model set or mismatched shapes.
std::vector<UniversalityRecord> summarize_universality(std::span<const MatrixD> corr,
                                                       std::span<const MatrixD> baseline,
                                                       double threshold = 0.5);

struct LayerLayout {
  int n_layer = 1;
  int d_mlp = 1;
  int layer_of(std::int64_t neuron) const { return static_cast<int>(neuron / d_mlp); }
};

// P[l][l'] = fraction of reference layer-l neurons whose best match sits in
// layer l' of the comparison model, averaged over comparison models. Neurons
// without a defined match are left out of the fraction.
MatrixD depth_specialization(std::span<const UniversalityRecord> records,
                             LayerLayout reference, LayerLayout comparison);

}  // namespace unrn
