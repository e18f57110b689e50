#include "unrn/forward.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace unrn {
namespace {

// C = A . B + bias (bias broadcast over rows; empty bias means zero).
void matmul(const Matrix& A, const Matrix& B, std::span<const float> bias, Matrix& C) {
  C = Matrix(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    float* c = C.data.data() + i * C.cols;
    if (!bias.empty()) std::copy(bias.begin(), bias.end(), c);
    const float* a = A.data.data() + i * A.cols;
    for (std::size_t k = 0; k < A.cols; ++k) {
      const float av = a[k];
      const float* b = B.data.data() + k * B.cols;
      for (std::size_t j = 0; j < B.cols; ++j) c[j] += av * b[j];
    }
  }
}

void row_times(std::span<const float> x, const Matrix& B, std::span<const float> bias,
               std::span<float> out) {
  if (bias.empty()) {
    std::fill(out.begin(), out.end(), 0.0f);
  } else {
    std::copy(bias.begin(), bias.end(), out.begin());
  }
  for (std::size_t k = 0; k < B.rows; ++k) {
    const float av = x[k];
    const float* b = B.data.data() + k * B.cols;
    for (std::size_t j = 0; j < B.cols; ++j) out[j] += av * b[j];
  }
}

Tensor matrix_tensor(const Matrix& m) { return Tensor({m.rows, m.cols}, m.data); }

void check_neuron(const ModelConfig& c, NeuronId n) {
  if (n.layer < 0 || n.layer >= c.n_layer || n.index < 0 || n.index >= c.d_mlp) {
    throw DataError("neuron " + to_string(n) + " out of range");
  }
}

void check_head(const ModelConfig& c, HeadId h) {
  if (h.layer < 0 || h.layer >= c.n_layer || h.head < 0 || h.head >= c.n_head) {
    throw DataError("head " + to_string(h) + " out of range");
  }
}

void check_positions(const std::vector<int>& positions, std::size_t T) {
  for (int p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= T) {
      throw DataError("intervention position " + std::to_string(p) + " outside context of " +
                      std::to_string(T));
    }
  }
}

std::vector<int> expand_positions(const std::vector<int>& positions, std::size_t T) {
  if (!positions.empty()) return positions;
  std::vector<int> all(T);
  for (std::size_t i = 0; i < T; ++i) all[i] = static_cast<int>(i);
  return all;
}

}  // namespace

float gelu(float x, Activation kind) {
  if (kind == Activation::gelu_exact) {
    return static_cast<float>(0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)));
  }
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

void gelu_inplace(std::span<float> x, Activation kind) {
  for (float& v : x) v = gelu(v, kind);
}

HookSet all_layers(Hook kind, int n_layer) {
  HookSet s;
  for (int l = 0; l < n_layer; ++l) s.insert({kind, l});
  return s;
}

const Tensor& ForwardResult::at(Hook kind, int layer) const {
  auto it = trace.find({kind, layer});
  if (it == trace.end()) throw DataError("hook was not captured");
  return it->second;
}

double layer_norm(std::span<const float> x, const LayerNormParams& ln, double eps,
                  std::span<float> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double scale = std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>((x[i] - mean) / scale * ln.w[i] + ln.b[i]);
  }
  return scale;
}

double softmax_entropy(std::span<const float> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max<double>(mx, v);
  double z = 0.0, s = 0.0;
  for (float v : logits) {
    const double d = v - mx;
    const double e = std::exp(d);
    z += e;
    s += e * d;
  }
  // H = log Z - E[d]
  return std::log(z) - s / z;
}

ForwardResult forward(const ModelWeights& w, std::span<const std::uint32_t> tokens,
                      const ForwardOptions& opts) {
  const auto& c = w.config;
  const std::size_t T = tokens.size();
  const std::size_t d = c.d_model, dh = c.d_head();
  if (T == 0) throw DataError("empty context");
  if (T > static_cast<std::size_t>(c.n_ctx)) {
    throw DataError("context of " + std::to_string(T) + " tokens exceeds n_ctx " +
                    std::to_string(c.n_ctx));
  }
  for (auto t : tokens) {
    if (t >= static_cast<std::uint32_t>(c.d_vocab)) {
      throw DataError("token id " + std::to_string(t) + " out of range");
    }
  }
  int last = opts.last_layer < 0 ? c.n_layer - 1 : opts.last_layer;
  if (last >= c.n_layer) throw DataError("last_layer out of range");
  if (opts.compute_logits) last = c.n_layer - 1;

  // Fix-neuron edits per layer, and path ablations per (target layer, head).
  std::vector<std::vector<const FixNeuron*>> fixes(c.n_layer);
  std::vector<const PathAblate*> ablations;
  for (const auto& iv : opts.interventions) {
    if (const auto* f = std::get_if<FixNeuron>(&iv)) {
      check_neuron(c, f->neuron);
      check_positions(f->positions, T);
      fixes[f->neuron.layer].push_back(f);
    } else {
      const auto& p = std::get<PathAblate>(iv);
      check_neuron(c, p.neuron);
      check_head(c, p.head);
      if (p.neuron.layer >= p.head.layer) {
        throw DataError("path ablation source " + to_string(p.neuron) +
                        " must precede head " + to_string(p.head));
      }
      check_positions(p.positions, T);
      ablations.push_back(&p);
    }
  }
  // Source-neuron activations recorded for path ablations.
  std::vector<std::vector<float>> source_act(ablations.size());

  ForwardResult res;
  auto want = [&](Hook k, int l) { return opts.hooks.count({k, l}) != 0; };

  Matrix resid(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = w.W_E.row(tokens[t]);
    const auto p = w.W_pos.row(t);
    auto r = resid.row(t);
    for (std::size_t i = 0; i < d; ++i) r[i] = e[i] + p[i];
  }

  Matrix x(T, d), q, k, v, z(T, dh), head_o(T, d);
  std::vector<float> scores(T);
  for (int l = 0; l <= last; ++l) {
    const auto& L = w.layers[l];
    if (want(Hook::resid_pre, l)) res.trace[{Hook::resid_pre, l}] = matrix_tensor(resid);

    for (std::size_t t = 0; t < T; ++t) layer_norm(resid.row(t), L.ln1, c.ln_eps, x.row(t));

    const bool want_pattern = want(Hook::attn_pattern, l);
    const bool want_v = want(Hook::attn_v, l);
    const bool want_head = want(Hook::head_out, l);
    Tensor pattern_t, v_t, head_t;
    if (want_pattern) pattern_t = Tensor({std::uint64_t(c.n_head), T, T}, std::vector<float>(c.n_head * T * T));
    if (want_v) v_t = Tensor({std::uint64_t(c.n_head), T, dh}, std::vector<float>(c.n_head * T * dh));
    if (want_head) head_t = Tensor({std::uint64_t(c.n_head), T, d}, std::vector<float>(c.n_head * T * d));

    Matrix attn_out(T, d);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < c.n_head; ++h) {
      matmul(x, L.W_Q[h], L.b_Q[h], q);
      matmul(x, L.W_K[h], L.b_K[h], k);
      matmul(x, L.W_V[h], L.b_V[h], v);

      // Sum of ablated contributions per destination position for this head.
      std::map<int, std::vector<float>> removed;
      for (std::size_t a = 0; a < ablations.size(); ++a) {
        const auto& p = *ablations[a];
        if (p.head.layer != l || p.head.head != h) continue;
        const auto w_out = w.layers[p.neuron.layer].W_out.row(p.neuron.index);
        for (int pos : expand_positions(p.positions, T)) {
          auto& acc = removed[pos];
          acc.resize(d, 0.0f);
          const float act = source_act[a][pos];
          for (std::size_t i = 0; i < d; ++i) acc[i] += act * w_out[i];
        }
      }
      if (!removed.empty()) {
        std::vector<float> edited(d), xq(d);
        for (const auto& [pos, acc] : removed) {
          const auto r = resid.row(pos);
          for (std::size_t i = 0; i < d; ++i) edited[i] = r[i] - acc[i];
          layer_norm(edited, L.ln1, c.ln_eps, xq);
          row_times(xq, L.W_Q[h], L.b_Q[h], q.row(pos));
        }
      }

      for (std::size_t dst = 0; dst < T; ++dst) {
        const auto qd = q.row(dst);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= dst; ++s) {
          const auto ks = k.row(s);
          double dot = 0.0;
          for (std::size_t i = 0; i < dh; ++i) dot += double{qd[i]} * ks[i];
          scores[s] = static_cast<float>(dot * inv_sqrt);
          mx = std::max<double>(mx, scores[s]);
        }
        double sum = 0.0;
        for (std::size_t s = 0; s <= dst; ++s) {
          const double e = std::exp(scores[s] - mx);
          scores[s] = static_cast<float>(e);
          sum += e;
        }
        auto zd = z.row(dst);
        std::fill(zd.begin(), zd.end(), 0.0f);
        for (std::size_t s = 0; s <= dst; ++s) {
          const float a = static_cast<float>(scores[s] / sum);
          scores[s] = a;
          const auto vs = v.row(s);
          for (std::size_t i = 0; i < dh; ++i) zd[i] += a * vs[i];
        }
        if (want_pattern) {
          float* dst_row = pattern_t.data.data() + (h * T + dst) * T;
          std::copy_n(scores.begin(), dst + 1, dst_row);
        }
      }
      matmul(z, L.W_O[h], {}, head_o);
      for (std::size_t i = 0; i < attn_out.data.size(); ++i) attn_out.data[i] += head_o.data[i];
      if (want_v) std::copy(v.data.begin(), v.data.end(), v_t.data.begin() + h * T * dh);
      if (want_head) std::copy(head_o.data.begin(), head_o.data.end(), head_t.data.begin() + h * T * d);
    }
    if (want_pattern) res.trace[{Hook::attn_pattern, l}] = std::move(pattern_t);
    if (want_v) res.trace[{Hook::attn_v, l}] = std::move(v_t);
    if (want_head) res.trace[{Hook::head_out, l}] = std::move(head_t);

    for (std::size_t t = 0; t < T; ++t) {
      auto r = resid.row(t);
      const auto ao = attn_out.row(t);
      for (std::size_t i = 0; i < d; ++i) r[i] += ao[i] + L.b_O[i];
    }
    if (want(Hook::resid_mid, l)) res.trace[{Hook::resid_mid, l}] = matrix_tensor(resid);

    for (std::size_t t = 0; t < T; ++t) layer_norm(resid.row(t), L.ln2, c.ln_eps, x.row(t));
    Matrix act;
    matmul(x, L.W_in, L.b_in, act);
    if (want(Hook::mlp_pre, l)) res.trace[{Hook::mlp_pre, l}] = matrix_tensor(act);
    gelu_inplace(act.data, c.activation);
    for (const auto* f : fixes[l]) {
      for (int pos : expand_positions(f->positions, T)) act(pos, f->neuron.index) = f->value;
    }
    for (std::size_t a = 0; a < ablations.size(); ++a) {
      if (ablations[a]->neuron.layer != l) continue;
      source_act[a].resize(T);
      for (std::size_t t = 0; t < T; ++t) source_act[a][t] = act(t, ablations[a]->neuron.index);
    }
    if (want(Hook::mlp_post, l)) res.trace[{Hook::mlp_post, l}] = matrix_tensor(act);
    Matrix mlp_out;
    matmul(act, L.W_out, L.b_out, mlp_out);
    for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += mlp_out.data[i];
    if (want(Hook::resid_post, l)) res.trace[{Hook::resid_post, l}] = matrix_tensor(resid);
  }

  if (!opts.compute_logits) return res;

  Tensor scale_t({T}, std::vector<float>(T));
  for (std::size_t t = 0; t < T; ++t) {
    scale_t.data[t] = static_cast<float>(layer_norm(resid.row(t), w.ln_final, c.ln_eps, x.row(t)));
  }
  if (want(Hook::ln_final_scale, -1)) res.trace[{Hook::ln_final_scale, -1}] = std::move(scale_t);

  matmul(x, w.W_U, w.b_U, res.logits);
  res.entropy.resize(T);
  res.argmax.resize(T);
  res.loss.resize(T - 1);
  res.next_token_rank.resize(T - 1);
  for (std::size_t t = 0; t < T; ++t) {
    const auto lg = res.logits.row(t);
    res.entropy[t] = softmax_entropy(lg);
    res.argmax[t] = static_cast<std::uint32_t>(std::max_element(lg.begin(), lg.end()) - lg.begin());
    if (t + 1 < T) {
      const float target = lg[tokens[t + 1]];
      double mx = -std::numeric_limits<double>::infinity();
      for (float v2 : lg) mx = std::max<double>(mx, v2);
      double z2 = 0.0;
      std::uint32_t rank = 1;
      for (float v2 : lg) {
        z2 += std::exp(v2 - mx);
        if (v2 > target) ++rank;
      }
      res.loss[t] = std::log(z2) + mx - target;
      res.next_token_rank[t] = rank;
    }
  }
  return res;
}

}  // namespace unrn
