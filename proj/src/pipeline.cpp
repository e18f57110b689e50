#include "unrn/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace unrn {
namespace {

// Activations of a run of windows stacked into one matrix, plus the matching
// slice of the mask.
struct Batch {
  Matrix acts;
  std::vector<std::uint8_t> mask;
};

std::vector<Matrix> window_activations(const ModelWeights& w, const MaskedTokens& data,
                                       std::span<const Window> windows, Hook kind, int workers) {
  std::vector<Matrix> out(windows.size());
  parallel_for(windows.size(), workers, [&](std::size_t i) {
    const auto tokens =
        std::span<const std::uint32_t>(data.stream.tokens).subspan(windows[i].begin, windows[i].length);
    out[i] = neuron_activations(w, tokens, kind);
  });
  return out;
}

Batch stack(const std::vector<Matrix>& parts, const MaskedTokens& data,
            std::span<const Window> windows) {
  Batch b;
  std::size_t rows = 0;
  for (const auto& p : parts) rows += p.rows;
  const std::size_t cols = parts.empty() ? 0 : parts.front().cols;
  b.acts = Matrix(rows, cols);
  b.mask.reserve(rows);
  std::size_t r = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::copy(parts[i].data.begin(), parts[i].data.end(), b.acts.data.begin() + r * cols);
    r += parts[i].rows;
    const auto m = std::span<const std::uint8_t>(data.mask).subspan(windows[i].begin, windows[i].length);
    b.mask.insert(b.mask.end(), m.begin(), m.end());
  }
  return b;
}

void check_finite(const Matrix& m) {
  for (float x : m.data) {
    if (!std::isfinite(x)) throw NumericError("non-finite neuron activation");
  }
}

}  // namespace

Matrix neuron_activations(const ModelWeights& w, std::span<const std::uint32_t> tokens,
                          Hook kind) {
  if (kind != Hook::mlp_pre && kind != Hook::mlp_post) {
    throw DataError("neuron activations come from mlp_pre or mlp_post");
  }
  const auto& c = w.config;
  ForwardOptions opts;
  opts.hooks = all_layers(kind, c.n_layer);
  opts.compute_logits = false;
  const auto r = forward(w, tokens, opts);
  const std::size_t T = tokens.size(), M = c.d_mlp;
  Matrix out(T, M * c.n_layer);
  for (int l = 0; l < c.n_layer; ++l) {
    const auto& a = r.at(kind, l).data;
    for (std::size_t t = 0; t < T; ++t) {
      std::copy_n(a.data() + t * M, M, out.data.data() + t * out.cols + l * M);
    }
  }
  return out;
}

void check_stream_fits(const ModelWeights& w, const TokenStream& s) {
  if (s.context_length > static_cast<std::uint32_t>(w.config.n_ctx)) {
    throw DataError("token stream context length " + std::to_string(s.context_length) +
                    " exceeds model n_ctx " + std::to_string(w.config.n_ctx));
  }
  for (auto t : s.tokens) {
    if (t >= static_cast<std::uint32_t>(w.config.d_vocab)) {
      throw DataError("token id " + std::to_string(t) + " is outside the model vocabulary");
    }
  }
}

CorrelateResult correlate_models(const ModelWeights& a, const ModelWeights& b,
                                 const MaskedTokens& data, const CorrelateOptions& opts) {
  check_stream_fits(a, data.stream);
  check_stream_fits(b, data.stream);
  const auto rotation = opts.rotation ? *opts.rotation
                                      : RotationBaseline::gaussian(b.config.n_layer, b.config.d_mlp,
                                                                   opts.baseline_seed);
  if (rotation.per_layer.size() != static_cast<std::size_t>(b.config.n_layer)) {
    throw DataError("rotation baseline does not match model b");
  }
  const std::size_t na = a.config.n_neurons(), nb = b.config.n_neurons();
  CorrState state(na, nb), base(na, nb);
  const auto windows = make_windows(data.stream);
  const std::size_t step = std::max<std::size_t>(1, opts.batch_windows);
  for (std::size_t start = 0; start < windows.size(); start += step) {
    const auto chunk = std::span<const Window>(windows).subspan(start, std::min(step, windows.size() - start));
    const auto ba = stack(window_activations(a, data, chunk, Hook::mlp_post, opts.workers), data, chunk);
    const auto bb = stack(window_activations(b, data, chunk, Hook::mlp_post, opts.workers), data, chunk);
    check_finite(ba.acts);
    check_finite(bb.acts);
    state.update(ba.acts, bb.acts, ba.mask, opts.workers, opts.tile_size);
    base.update(ba.acts, rotation.apply(bb.acts), ba.mask, opts.workers, opts.tile_size);
  }
  CorrelateResult r;
  r.n_tokens = state.count();
  r.n_windows = windows.size();
  r.baseline_seed = opts.rotation ? opts.rotation->seed : opts.baseline_seed;
  r.corr = corr_finalize(state);
  r.baseline = corr_finalize(base);
  return r;
}

ActivationMoments activation_moments(const ModelWeights& w, const MaskedTokens& data, int workers,
                                     std::size_t batch_windows) {
  check_stream_fits(w, data.stream);
  ActivationMoments moments(w.config.n_neurons());
  const auto windows = make_windows(data.stream);
  const std::size_t step = std::max<std::size_t>(1, batch_windows);
  for (std::size_t start = 0; start < windows.size(); start += step) {
    const auto chunk = std::span<const Window>(windows).subspan(start, std::min(step, windows.size() - start));
    const auto batch = stack(window_activations(w, data, chunk, Hook::mlp_pre, workers), data, chunk);
    check_finite(batch.acts);
    moments.update(batch.acts, batch.mask, workers);
  }
  return moments;
}

ExplainResult explain_neurons(const ModelWeights& w, const MaskedTokens& data,
                              std::span<const std::vector<std::uint8_t>> labels,
                              const ExplainOptions& opts) {
  check_stream_fits(w, data.stream);
  const std::size_t n_tok = data.stream.tokens.size();
  for (const auto& l : labels) {
    if (l.size() != n_tok) throw DataError("label stream length does not match the token stream");
  }
  const std::size_t N = w.config.n_neurons();
  const std::size_t ctx = data.stream.context_length;
  std::vector<MomentState> total(N);
  std::vector<std::vector<MomentState>> positive(labels.size(), std::vector<MomentState>(N));
  // Full windows kept for position MI: per neuron, windows x ctx.
  std::vector<std::vector<float>> mi_acts(N);
  std::size_t mi_windows = 0;

  const auto windows = make_windows(data.stream);
  const std::size_t step = std::max<std::size_t>(1, opts.batch_windows);
  for (std::size_t start = 0; start < windows.size(); start += step) {
    const auto chunk = std::span<const Window>(windows).subspan(start, std::min(step, windows.size() - start));
    const auto acts = window_activations(w, data, chunk, Hook::mlp_post, opts.workers);
    for (const auto& a : acts) check_finite(a);

    // Per window: masked-in rows, and positive rows for each test.
    parallel_for(N, opts.workers, [&](std::size_t j) {
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        std::vector<double> col;
        for (std::size_t t = 0; t < chunk[i].length; ++t) {
          if (data.mask[chunk[i].begin + t]) col.push_back(acts[i](t, j));
        }
        total[j].merge(MomentState::of(col));
      }
    });
    parallel_for(labels.size(), opts.workers, [&](std::size_t k) {
      std::vector<std::size_t> rows;
      std::vector<double> col;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        rows.clear();
        for (std::size_t t = 0; t < chunk[i].length; ++t) {
          const std::size_t g = chunk[i].begin + t;
          if (data.mask[g] && labels[k][g]) rows.push_back(t);
        }
        if (rows.empty()) continue;
        col.resize(rows.size());
        for (std::size_t j = 0; j < N; ++j) {
          for (std::size_t r = 0; r < rows.size(); ++r) col[r] = acts[i](rows[r], j);
          positive[k][j].merge(MomentState::of(col));
        }
      }
    });
    for (std::size_t i = 0; i < chunk.size() && mi_windows < opts.max_mi_windows; ++i) {
      if (chunk[i].length != ctx) continue;
      for (std::size_t j = 0; j < N; ++j) {
        for (std::size_t t = 0; t < ctx; ++t) mi_acts[j].push_back(acts[i](t, j));
      }
      ++mi_windows;
    }
  }

  ExplainResult r;
  r.n_tokens = total.empty() ? 0 : total.front().count;
  r.n_mi_windows = mi_windows;
  auto stats = [](const MomentState& m) { return VarianceStats{m.count, m.mean, m.m2}; };
  r.riv.resize(labels.size());
  for (std::size_t k = 0; k < labels.size(); ++k) {
    r.riv[k].resize(N);
    for (std::size_t j = 0; j < N; ++j) {
      r.riv[k][j] = riv_from_partition(stats(total[j]), stats(positive[k][j]));
    }
  }
  const bool enough = mi_windows >= static_cast<std::size_t>(opts.mi.activation_bins) &&
                      ctx >= static_cast<std::size_t>(opts.mi.position_bins);
  if (enough) {
    r.position.resize(N);
    parallel_for(N, opts.workers, [&](std::size_t j) {
      Matrix m(mi_windows, ctx);
      m.data = std::move(mi_acts[j]);
      r.position[j] = position_mutual_information(m, opts.mi);
    });
  }
  return r;
}

}  // namespace unrn
