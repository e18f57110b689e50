#include "fixtures.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace fixtures {

TempDir::TempDir() {
  std::random_device rd;
  const auto base = std::filesystem::temp_directory_path();
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto p = base / ("unrn_test_" + std::to_string(rd()) + std::to_string(rd()));
    if (std::filesystem::create_directory(p)) {
      path_ = p;
      return;
    }
  }
  throw std::runtime_error("could not create a temporary directory");
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

ModelConfig tiny_config(int n_layer, int n_head, int d_model, int d_mlp, int d_vocab, int n_ctx) {
  ModelConfig c;
  c.n_layer = n_layer;
  c.n_head = n_head;
  c.d_model = d_model;
  c.d_mlp = d_mlp;
  c.d_vocab = d_vocab;
  c.n_ctx = n_ctx;
  return c;
}

ModelWeights random_full_model(const ModelConfig& cfg, std::uint64_t seed) {
  auto w = random_weights(cfg, seed, 0.3);
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> n(0.0, 1.0);
  auto jitter = [&](std::vector<float>& v, double center, double scale) {
    for (auto& x : v) x = static_cast<float>(center + scale * n(rng));
  };
  for (auto& L : w.layers) {
    jitter(L.ln1.w, 1.0, 0.3);
    jitter(L.ln1.b, 0.0, 0.2);
    jitter(L.ln2.w, 1.0, 0.3);
    jitter(L.ln2.b, 0.0, 0.2);
    for (auto* bs : {&L.b_Q, &L.b_K, &L.b_V}) {
      for (auto& b : *bs) jitter(b, 0.0, 0.1);
    }
    jitter(L.b_O, 0.0, 0.1);
    jitter(L.b_in, 0.0, 0.1);
    jitter(L.b_out, 0.0, 0.1);
  }
  jitter(w.ln_final.w, 1.0, 0.3);
  jitter(w.ln_final.b, 0.0, 0.2);
  jitter(w.b_U, 0.0, 0.1);
  return w;
}

TokenStream random_stream(std::size_t n_docs, std::size_t doc_len, std::uint32_t context_length,
                          std::uint32_t d_vocab, std::uint64_t seed, std::uint32_t bos,
                          std::uint32_t first_id) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> pick(first_id, d_vocab - 1);
  TokenStream s;
  s.context_length = context_length;
  std::vector<std::uint32_t> doc;
  for (std::size_t d = 0; d < n_docs; ++d) {
    doc.assign(1, bos);
    while (doc.size() < doc_len) doc.push_back(pick(rng));
    s.add_document(doc);
  }
  return s;
}

MaskedTokens all_in(TokenStream s) {
  MaskedTokens m;
  m.mask.assign(s.tokens.size(), 1);
  m.stream = std::move(s);
  return m;
}

std::vector<double> gaussian(std::size_t n, std::uint64_t seed, double mean, double std) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(mean, std);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

namespace {

std::vector<double> unit(std::vector<double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  s = std::sqrt(s);
  for (auto& x : v) x /= s;
  return v;
}

ModelWeights zero_model(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, dh = cfg.d_head(), nh = cfg.n_head, m = cfg.d_mlp,
                    v = cfg.d_vocab;
  ModelWeights w;
  w.config = cfg;
  w.W_E = Matrix(v, d);
  w.W_pos = Matrix(cfg.n_ctx, d);
  w.layers.resize(cfg.n_layer);
  for (auto& L : w.layers) {
    L.ln1 = {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
    L.ln2 = L.ln1;
    L.W_Q.assign(nh, Matrix(d, dh));
    L.W_K = L.W_Q;
    L.W_V = L.W_Q;
    L.W_O.assign(nh, Matrix(dh, d));
    L.b_Q.assign(nh, std::vector<float>(dh, 0.0f));
    L.b_K = L.b_Q;
    L.b_V = L.b_Q;
    L.b_O.assign(d, 0.0f);
    L.W_in = Matrix(d, m);
    L.b_in.assign(m, 0.0f);
    L.W_out = Matrix(m, d);
    L.b_out.assign(d, 0.0f);
  }
  w.ln_final = {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
  w.W_U = Matrix(d, v);
  w.b_U.assign(v, 0.0f);
  w.preprocessed = true;
  return w;
}

// Removes the z component from a d-vector stored as floats.
void project_out(std::span<float> x, const std::vector<double>& z) {
  double dot = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) dot += x[i] * z[i];
  for (std::size_t i = 0; i < z.size(); ++i) x[i] = static_cast<float>(x[i] - dot * z[i]);
}

}  // namespace

ModelWeights path_toy_model(std::uint64_t seed) {
  auto cfg = tiny_config(2, 1, 8, 4, 16, 64);
  auto w = zero_model(cfg);
  const double r2 = std::sqrt(0.5);
  const std::vector<double> a = {r2, -r2, 0, 0, 0, 0, 0, 0};
  const std::vector<double> u = {0, 0, r2, -r2, 0, 0, 0, 0};
  // Zero-mean orthonormal basis of the token subspace.
  const std::vector<std::vector<double>> g = {unit({0, 0, 0, 0, 1, -1, 0, 0}),
                                              unit({0, 0, 0, 0, 0, 0, 1, -1}),
                                              unit({0, 0, 0, 0, 1, 1, -1, -1})};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (std::size_t i = 0; i < 8; ++i) w.W_E(0, i) = static_cast<float>(3.0 * a[i]);
  for (int t = 1; t < cfg.d_vocab; ++t) {
    const double c0 = n(rng), c1 = n(rng), c2 = n(rng);
    for (std::size_t i = 0; i < 8; ++i) {
      w.W_E(t, i) = static_cast<float>(c0 * g[0][i] + c1 * g[1][i] + c2 * g[2][i]);
    }
  }
  // Layer 0: neuron 0 is constant gelu(2) and writes 2u.
  auto& L0 = w.layers[0];
  L0.b_in[0] = 2.0f;
  for (std::size_t i = 0; i < 8; ++i) L0.W_out(0, i) = static_cast<float>(2.0 * u[i]);
  // Layer 1 head: keys read a, queries read u, values read the token subspace.
  auto& L1 = w.layers[1];
  for (std::size_t i = 0; i < 8; ++i) {
    L1.W_K[0](i, 0) = static_cast<float>(a[i]);
    L1.W_Q[0](i, 0) = static_cast<float>(u[i]);
    for (std::size_t j = 0; j < 3; ++j) {
      L1.W_V[0](i, j + 1) = static_cast<float>(g[j][i]);
      L1.W_O[0](j + 1, i) = static_cast<float>(g[j][i]);
    }
  }
  for (auto& x : w.W_U.data) x = static_cast<float>(n(rng));
  return w;
}

ModelWeights entropy_toy_model(std::uint64_t seed) {
  auto cfg = tiny_config(2, 2, 16, 16, 32, 32);
  auto w = random_weights(cfg, seed, 0.3);
  auto zr = gaussian(cfg.d_model, seed + 7);
  double mean = 0.0;
  for (double x : zr) mean += x;
  mean /= static_cast<double>(zr.size());
  for (auto& x : zr) x -= mean;
  const auto z = unit(zr);
  auto rows = [&](Matrix& m) {
    for (std::size_t r = 0; r < m.rows; ++r) project_out(m.row(r), z);
  };
  rows(w.W_E);
  rows(w.W_pos);
  for (auto& L : w.layers) {
    for (auto& O : L.W_O) rows(O);
    project_out(L.b_O, z);
    rows(L.W_out);
    project_out(L.b_out, z);
  }
  std::vector<float> col(cfg.d_model);
  for (int v = 0; v < cfg.d_vocab; ++v) {
    for (int i = 0; i < cfg.d_model; ++i) col[i] = w.W_U(i, v);
    project_out(col, z);
    for (int i = 0; i < cfg.d_model; ++i) w.W_U(i, v) = col[i];
  }
  auto& last = w.layers.back();
  for (int i = 0; i < cfg.d_model; ++i) last.W_out(0, i) = static_cast<float>(20.0 * z[i]);
  w.preprocessed = true;
  return w;
}

ModelWeights antipodal_toy_model(std::uint64_t seed) {
  auto w = entropy_toy_model(seed);
  auto& last = w.layers.back();
  for (std::size_t i = 0; i < last.W_in.rows; ++i) last.W_in(i, 1) = last.W_in(i, 0);
  last.b_in[1] = last.b_in[0];
  for (std::size_t i = 0; i < last.W_out.cols; ++i) last.W_out(1, i) = -last.W_out(0, i);
  return w;
}

// ------------------------------------------------------------ reference

namespace {

using Rows = std::vector<std::vector<double>>;

std::vector<double> ref_ln(const std::vector<double>& x, const LayerNormParams& ln, double eps,
                           double* scale = nullptr) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double s = std::sqrt(var + eps);
  if (scale) *scale = s;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / s * ln.w[i] + ln.b[i];
  return out;
}

std::vector<double> ref_affine(const std::vector<double>& x, const Matrix& W,
                               const std::vector<float>& b) {
  std::vector<double> out(W.cols, 0.0);
  for (std::size_t j = 0; j < W.cols; ++j) {
    double acc = b.empty() ? 0.0 : b[j];
    for (std::size_t i = 0; i < W.rows; ++i) acc += x[i] * W(i, j);
    out[j] = acc;
  }
  return out;
}

double ref_gelu(double x, Activation a) {
  if (a == Activation::gelu_exact) return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

bool at_position(const std::vector<int>& positions, std::size_t t) {
  if (positions.empty()) return true;
  for (int p : positions) {
    if (static_cast<std::size_t>(p) == t) return true;
  }
  return false;
}

}  // namespace

RefTrace reference_forward(const ModelWeights& w, std::span<const std::uint32_t> tokens,
                           const RefEdit& edit) {
  const auto& c = w.config;
  const std::size_t T = tokens.size(), D = c.d_model, H = c.n_head, dh = c.d_head(), M = c.d_mlp;
  RefTrace tr;
  Rows resid(T, std::vector<double>(D));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < D; ++i) resid[t][i] = double{w.W_E(tokens[t], i)} + w.W_pos(t, i);
  }
  tr.pattern.resize(c.n_layer);
  tr.head_out.resize(c.n_layer);
  tr.mlp_pre.resize(c.n_layer);
  tr.mlp_post.resize(c.n_layer);
  for (int l = 0; l < c.n_layer; ++l) {
    const auto& L = w.layers[l];
    Rows x(T);
    for (std::size_t t = 0; t < T; ++t) x[t] = ref_ln(resid[t], L.ln1, c.ln_eps);
    Rows attn(T, std::vector<double>(D, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      Rows q(T), k(T), v(T);
      for (std::size_t t = 0; t < T; ++t) {
        q[t] = ref_affine(x[t], L.W_Q[h], L.b_Q[h]);
        k[t] = ref_affine(x[t], L.W_K[h], L.b_K[h]);
        v[t] = ref_affine(x[t], L.W_V[h], L.b_V[h]);
      }
      if (edit.ablate && edit.ablate->head.layer == l &&
          edit.ablate->head.head == static_cast<int>(h)) {
        const auto& src = edit.ablate->neuron;
        const auto& post = tr.mlp_post[src.layer];
        for (std::size_t t = 0; t < T; ++t) {
          if (!at_position(edit.ablate->positions, t)) continue;
          auto edited = resid[t];
          const double act = post[t * M + src.index];
          for (std::size_t i = 0; i < D; ++i) edited[i] -= act * w.layers[src.layer].W_out(src.index, i);
          q[t] = ref_affine(ref_ln(edited, L.ln1, c.ln_eps), L.W_Q[h], L.b_Q[h]);
        }
      }
      std::vector<double> pat(T * T, 0.0), out(T * D, 0.0);
      for (std::size_t d = 0; d < T; ++d) {
        std::vector<double> s(d + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= d; ++j) {
          double dot = 0.0;
          for (std::size_t i = 0; i < dh; ++i) dot += q[d][i] * k[j][i];
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) {
          e = std::exp(e - mx);
          z += e;
        }
        std::vector<double> zd(dh, 0.0);
        for (std::size_t j = 0; j <= d; ++j) {
          pat[d * T + j] = s[j] / z;
          for (std::size_t i = 0; i < dh; ++i) zd[i] += pat[d * T + j] * v[j][i];
        }
        const auto o = ref_affine(zd, L.W_O[h], {});
        for (std::size_t i = 0; i < D; ++i) {
          out[d * D + i] = o[i];
          attn[d][i] += o[i];
        }
      }
      tr.pattern[l].push_back(std::move(pat));
      tr.head_out[l].push_back(std::move(out));
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t i = 0; i < D; ++i) resid[t][i] += attn[t][i] + L.b_O[i];
    }
    tr.mlp_pre[l].resize(T * M);
    tr.mlp_post[l].resize(T * M);
    for (std::size_t t = 0; t < T; ++t) {
      const auto pre = ref_affine(ref_ln(resid[t], L.ln2, c.ln_eps), L.W_in, L.b_in);
      std::vector<double> post(M);
      for (std::size_t j = 0; j < M; ++j) {
        tr.mlp_pre[l][t * M + j] = pre[j];
        post[j] = ref_gelu(pre[j], c.activation);
        if (edit.fix && edit.fix->neuron.layer == l && edit.fix->neuron.index == static_cast<int>(j) &&
            at_position(edit.fix->positions, t)) {
          post[j] = edit.fix->value;
        }
        tr.mlp_post[l][t * M + j] = post[j];
      }
      const auto out = ref_affine(post, L.W_out, L.b_out);
      for (std::size_t i = 0; i < D; ++i) resid[t][i] += out[i];
    }
  }
  tr.ln_scale.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto x = ref_ln(resid[t], w.ln_final, c.ln_eps, &tr.ln_scale[t]);
    tr.logits.push_back(ref_affine(x, w.W_U, w.b_U));
  }
  return tr;
}

std::vector<double> softmax(std::span<const double> logits) {
  double mx = -1e300;
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

}  // namespace fixtures
