#include "unrn/corr.hpp"

#include <algorithm>
#include <random>

namespace unrn {

CorrState::CorrState(std::size_t n_a, std::size_t n_b)
    : sum_a_(n_a, 0.0), sumsq_a_(n_a, 0.0), sum_b_(n_b, 0.0), sumsq_b_(n_b, 0.0),
      cross_(n_a, n_b, 0.0) {}

void CorrState::update(const Matrix& batch_a, const Matrix& batch_b,
                       std::span<const std::uint8_t> mask, int workers, std::size_t tile_size) {
  if (batch_a.cols != size_a() || batch_b.cols != size_b()) {
    throw DataError("correlation batch width does not match state");
  }
  if (batch_a.rows != batch_b.rows) throw DataError("correlation batches cover different tokens");
  if (mask.size() != batch_a.rows) throw DataError("mask length does not match batch");
  if (tile_size == 0) tile_size = 1;

  std::vector<std::size_t> rows;
  rows.reserve(mask.size());
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) rows.push_back(t);
  }
  if (rows.empty()) return;

  const std::size_t na = size_a(), nb = size_b(), nr = rows.size();
  // Masked-in rows as f64, token-major.
  std::vector<double> a(nr * na), b(nr * nb);
  for (std::size_t r = 0; r < nr; ++r) {
    const auto ra = batch_a.row(rows[r]);
    const auto rb = batch_b.row(rows[r]);
    std::copy(ra.begin(), ra.end(), a.begin() + r * na);
    std::copy(rb.begin(), rb.end(), b.begin() + r * nb);
  }

  for (std::size_t r = 0; r < nr; ++r) {
    const double* ra = a.data() + r * na;
    for (std::size_t i = 0; i < na; ++i) {
      sum_a_[i] += ra[i];
      sumsq_a_[i] += ra[i] * ra[i];
    }
    const double* rb = b.data() + r * nb;
    for (std::size_t j = 0; j < nb; ++j) {
      sum_b_[j] += rb[j];
      sumsq_b_[j] += rb[j] * rb[j];
    }
  }
  n_ += nr;

  const std::size_t n_tiles = (na + tile_size - 1) / tile_size;
  parallel_for(n_tiles, workers, [&](std::size_t tile) {
    const std::size_t i0 = tile * tile_size;
    const std::size_t i1 = std::min(na, i0 + tile_size);
    for (std::size_t r = 0; r < nr; ++r) {
      const double* ra = a.data() + r * na;
      const double* rb = b.data() + r * nb;
      for (std::size_t i = i0; i < i1; ++i) {
        const double av = ra[i];
        double* out = cross_.data.data() + i * nb;
        for (std::size_t j = 0; j < nb; ++j) out[j] += av * rb[j];
      }
    }
  });
}

void CorrState::merge(const CorrState& other) {
  if (other.size_a() != size_a() || other.size_b() != size_b()) {
    throw DataError("cannot merge correlation states of different shapes");
  }
  n_ += other.n_;
  for (std::size_t i = 0; i < size_a(); ++i) {
    sum_a_[i] += other.sum_a_[i];
    sumsq_a_[i] += other.sumsq_a_[i];
  }
  for (std::size_t j = 0; j < size_b(); ++j) {
    sum_b_[j] += other.sum_b_[j];
    sumsq_b_[j] += other.sumsq_b_[j];
  }
  for (std::size_t k = 0; k < cross_.data.size(); ++k) cross_.data[k] += other.cross_.data[k];
}

namespace {

// sqrt(Sxx - Sx^2/n), or NaN when the variance vanishes to rounding.
std::vector<double> centered_norms(const std::vector<double>& sum, const std::vector<double>& sumsq,
                                   double n) {
  std::vector<double> out(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const double ss = sumsq[i] - sum[i] * sum[i] / n;
    out[i] = ss > 1e-10 * sumsq[i] && ss > 0.0 ? std::sqrt(ss) : kUndefined;
  }
  return out;
}

}  // namespace

MatrixD corr_finalize(const CorrState& s) {
  if (s.count() < 2) throw NumericError("correlation needs at least 2 tokens");
  const double n = static_cast<double>(s.count());
  const auto norm_a = centered_norms(s.sum_a(), s.sumsq_a(), n);
  const auto norm_b = centered_norms(s.sum_b(), s.sumsq_b(), n);
  MatrixD out(s.size_a(), s.size_b());
  for (std::size_t i = 0; i < s.size_a(); ++i) {
    for (std::size_t j = 0; j < s.size_b(); ++j) {
      if (!is_defined(norm_a[i]) || !is_defined(norm_b[j])) {
        out(i, j) = kUndefined;
        continue;
      }
      const double num = s.cross()(i, j) - s.sum_a()[i] * s.sum_b()[j] / n;
      out(i, j) = std::clamp(num / (norm_a[i] * norm_b[j]), -1.0, 1.0);
    }
  }
  return out;
}

RotationBaseline RotationBaseline::gaussian(int n_layer, int d_mlp, std::uint64_t seed) {
  RotationBaseline r;
  r.seed = seed;
  for (int l = 0; l < n_layer; ++l) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(l)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix R(d_mlp, d_mlp);
    for (auto& x : R.data) x = static_cast<float>(normal(rng));
    r.per_layer.push_back(std::move(R));
  }
  return r;
}

RotationBaseline RotationBaseline::identity(int n_layer, int d_mlp) {
  RotationBaseline r;
  for (int l = 0; l < n_layer; ++l) {
    Matrix R(d_mlp, d_mlp);
    for (int i = 0; i < d_mlp; ++i) R(i, i) = 1.0f;
    r.per_layer.push_back(std::move(R));
  }
  return r;
}

Matrix RotationBaseline::apply(const Matrix& acts) const {
  if (per_layer.empty()) throw DataError("empty rotation baseline");
  const std::size_t m = per_layer.front().rows;
  if (acts.cols != m * per_layer.size()) throw DataError("rotation does not match activation width");
  Matrix out(acts.rows, acts.cols);
  for (std::size_t t = 0; t < acts.rows; ++t) {
    const auto in = acts.row(t);
    auto o = out.row(t);
    for (std::size_t l = 0; l < per_layer.size(); ++l) {
      const auto& R = per_layer[l];
      for (std::size_t j = 0; j < m; ++j) {
        const auto rj = R.row(j);
        float acc = 0.0f;
        for (std::size_t k = 0; k < m; ++k) acc += rj[k] * in[l * m + k];
        o[l * m + j] = acc;
      }
    }
  }
  return out;
}

std::vector<std::pair<double, std::int64_t>> row_max(const MatrixD& m) {
  std::vector<std::pair<double, std::int64_t>> out(m.rows, {kUndefined, -1});
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      const double v = m(i, j);
      if (!is_defined(v)) continue;
      if (out[i].second < 0 || v > out[i].first) out[i] = {v, static_cast<std::int64_t>(j)};
    }
  }
  return out;
}

std::vector<UniversalityRecord> summarize_universality(std::span<const MatrixD> corr,
                                                       std::span<const MatrixD> baseline,
                                                       double threshold) {
  if (corr.empty()) throw DataError("no comparison models");
  if (baseline.size() != corr.size()) throw DataError("need one baseline per comparison model");
  const std::size_t n = corr.front().rows;
  for (std::size_t m = 0; m < corr.size(); ++m) {
    if (corr[m].rows != n || baseline[m].rows != n) {
      throw DataError("correlation matrices disagree on the reference neuron count");
    }
  }
  std::vector<std::vector<std::pair<double, std::int64_t>>> maxes, base_maxes;
  for (std::size_t m = 0; m < corr.size(); ++m) {
    maxes.push_back(row_max(corr[m]));
    base_maxes.push_back(row_max(baseline[m]));
  }
  const double n_models = static_cast<double>(corr.size());
  std::vector<UniversalityRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out[i];
    r.neuron = i;
    double sum_max = 0.0, sum_base = 0.0;
    double mx = -2.0, mn = 2.0;
    for (std::size_t m = 0; m < corr.size(); ++m) {
      const auto [v, j] = maxes[m][i];
      const double b = base_maxes[m][i].first;
      r.max_corr.push_back(v);
      r.argmax.push_back(j);
      r.baseline_max.push_back(b);
      sum_max += v;
      sum_base += b;
      mx = std::max(mx, v);
      mn = std::min(mn, v);
    }
    r.mean_max = sum_max / n_models;
    r.mean_baseline = sum_base / n_models;
    r.excess = r.mean_max - r.mean_baseline;
    const bool defined = is_defined(sum_max);
    r.max_max = defined ? mx : kUndefined;
    r.min_max = defined ? mn : kUndefined;
    r.is_universal = is_defined(r.excess) && r.excess > threshold;
  }
  return out;
}

MatrixD depth_specialization(std::span<const UniversalityRecord> records, LayerLayout reference,
                             LayerLayout comparison) {
  MatrixD P(reference.n_layer, comparison.n_layer, 0.0);
  if (records.empty()) return P;
  const std::size_t n_models = records.front().argmax.size();
  for (std::size_t m = 0; m < n_models; ++m) {
    MatrixD counts(reference.n_layer, comparison.n_layer, 0.0);
    std::vector<double> valid(reference.n_layer, 0.0);
    for (const auto& r : records) {
      const auto j = r.argmax.at(m);
      if (j < 0) continue;
      const int l = reference.layer_of(static_cast<std::int64_t>(r.neuron));
      const int lp = comparison.layer_of(j);
      if (l < 0 || l >= reference.n_layer || lp < 0 || lp >= comparison.n_layer) {
        throw DataError("neuron index outside layer layout");
      }
      counts(l, lp) += 1.0;
      valid[l] += 1.0;
    }
    for (int l = 0; l < reference.n_layer; ++l) {
      if (valid[l] == 0.0) continue;
      for (int lp = 0; lp < comparison.n_layer; ++lp) {
        P(l, lp) += counts(l, lp) / valid[l] / static_cast<double>(n_models);
      }
    }
  }
  return P;
}

}  // namespace unrn
