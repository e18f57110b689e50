#include "unrn/neuron_stats.hpp"

#include <algorithm>
#include <cmath>

namespace unrn {

void MomentState::add(double x) {
  MomentState one;
  one.count = 1;
  one.mean = x;
  one.positives = x > 0.0 ? 1 : 0;
  merge(one);
}

// Pairwise combination of central moments up to fourth order.
void MomentState::merge(const MomentState& o) {
  if (o.count == 0) return;
  if (count == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(count), nb = static_cast<double>(o.count);
  const double n = na + nb;
  const double delta = o.mean - mean;
  const double d2 = delta * delta, d3 = d2 * delta, d4 = d2 * d2;

  const double m2n = m2 + o.m2 + d2 * na * nb / n;
  const double m3n = m3 + o.m3 + d3 * na * nb * (na - nb) / (n * n) +
                     3.0 * delta * (na * o.m2 - nb * m2) / n;
  const double m4n = m4 + o.m4 + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n) +
                     6.0 * d2 * (na * na * o.m2 + nb * nb * m2) / (n * n) +
                     4.0 * delta * (na * o.m3 - nb * m3) / n;
  mean += delta * nb / n;
  m2 = m2n;
  m3 = m3n;
  m4 = m4n;
  count += o.count;
  positives += o.positives;
}

MomentState MomentState::of(std::span<const double> xs) {
  MomentState s;
  if (xs.empty()) return s;
  s.count = xs.size();
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  s.mean = mean;
  for (double x : xs) {
    const double d = x - mean;
    const double d2 = d * d;
    s.m2 += d2;
    s.m3 += d2 * d;
    s.m4 += d2 * d2;
    if (x > 0.0) ++s.positives;
  }
  return s;
}

Moments finalize(const MomentState& s) {
  Moments m;
  if (s.count == 0) return m;
  const double n = static_cast<double>(s.count);
  m.mean = s.mean;
  m.variance = s.m2 / n;
  m.sparsity = static_cast<double>(s.positives) / n;
  // Relative test: rounding can leave a tiny positive m2 for constant input.
  if (m.variance > 1e-14 * std::max(1.0, s.mean * s.mean)) {
    m.skew = (s.m3 / n) / std::pow(m.variance, 1.5);
    m.kurtosis = (s.m4 / n) / (m.variance * m.variance);
  }
  return m;
}

Moments vector_moments(std::span<const double> xs) { return finalize(MomentState::of(xs)); }

void ActivationMoments::update(const Matrix& batch, std::span<const std::uint8_t> mask,
                               int workers) {
  if (batch.cols != states_.size()) throw DataError("moment batch width does not match");
  if (mask.size() != batch.rows) throw DataError("mask length does not match batch");
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < mask.size(); ++t) {
    if (mask[t]) rows.push_back(t);
  }
  if (rows.empty()) return;
  parallel_for(states_.size(), workers, [&](std::size_t j) {
    std::vector<double> col(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) col[r] = batch(rows[r], j);
    states_[j].merge(MomentState::of(col));
  });
}

void ActivationMoments::merge(const ActivationMoments& other) {
  if (other.states_.size() != states_.size()) throw DataError("moment state size mismatch");
  for (std::size_t j = 0; j < states_.size(); ++j) states_[j].merge(other.states_[j]);
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double{a[i]} * b[i];
    na += double{a[i]} * a[i];
    nb += double{b[i]} * b[i];
  }
  if (na == 0.0 || nb == 0.0) return kUndefined;
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

std::vector<double> vocab_cosines(const ModelWeights& w, int layer, int neuron) {
  const auto wout = w.w_out(layer, neuron);
  const auto& U = w.W_U;
  double nw = 0.0;
  for (float x : wout) nw += double{x} * x;
  std::vector<double> dot(U.cols, 0.0), nu(U.cols, 0.0);
  for (std::size_t i = 0; i < U.rows; ++i) {
    const auto row = U.row(i);
    for (std::size_t v = 0; v < U.cols; ++v) {
      dot[v] += double{wout[i]} * row[v];
      nu[v] += double{row[v]} * row[v];
    }
  }
  std::vector<double> out(U.cols);
  for (std::size_t v = 0; v < U.cols; ++v) {
    out[v] = (nw == 0.0 || nu[v] == 0.0) ? kUndefined : dot[v] / std::sqrt(nw * nu[v]);
  }
  return out;
}

std::vector<double> logit_effect(const ModelWeights& w, int layer, int neuron) {
  const auto wout = w.w_out(layer, neuron);
  const auto& U = w.W_U;
  std::vector<double> out(U.cols, 0.0);
  for (std::size_t i = 0; i < U.rows; ++i) {
    const auto row = U.row(i);
    for (std::size_t v = 0; v < U.cols; ++v) out[v] += double{wout[i]} * row[v];
  }
  return out;
}

std::vector<WeightSummary> weight_summaries(const ModelWeights& w, int workers) {
  const auto& c = w.config;
  std::vector<WeightSummary> out(static_cast<std::size_t>(c.n_neurons()));
  parallel_for(out.size(), workers, [&](std::size_t g) {
    const int l = static_cast<int>(g) / c.d_mlp, j = static_cast<int>(g) % c.d_mlp;
    auto& s = out[g];
    s.layer = l;
    s.index = j;
    const auto win = w.w_in(l, j);
    const auto wout = w.w_out(l, j);
    s.b_in = w.layers[l].b_in[j];
    s.cos_in_out = cosine(win, wout);
    double ni = 0.0, no = 0.0;
    for (float x : win) ni += double{x} * x;
    for (float x : wout) no += double{x} * x;
    s.weight_penalty = ni + no;
    s.w_out_norm = std::sqrt(no);
    const auto cos = vocab_cosines(w, l, j);
    if (std::all_of(cos.begin(), cos.end(), is_defined)) {
      const auto m = vector_moments(cos);
      s.vocab_var = m.variance;
      s.vocab_skew = m.skew;
      s.vocab_kurt = m.kurtosis;
    }
    s.logit_var = vector_moments(logit_effect(w, l, j)).variance;
  });
  return out;
}

void LayerPercentileTable::add(int layer, const std::string& metric, double value) {
  values_[{layer, metric}].push_back(value);
}

void LayerPercentileTable::build() {
  for (auto& [key, v] : values_) {
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
    std::sort(v.begin(), v.end());
  }
}

double LayerPercentileTable::percentile(int layer, const std::string& metric, double value) const {
  auto it = values_.find({layer, metric});
  if (it == values_.end()) {
    throw DataError("no percentile table for layer " + std::to_string(layer) + " metric " + metric);
  }
  const auto& v = it->second;
  if (v.empty() || std::isnan(value)) return kUndefined;
  const auto below = std::lower_bound(v.begin(), v.end(), value) - v.begin();
  return 100.0 * static_cast<double>(below) / static_cast<double>(v.size());
}

}  // namespace unrn
