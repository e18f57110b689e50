#include "unrn/model.hpp"

#include <charconv>
#include <fstream>
#include <random>

#include <json.hpp>

#include "unrn/tensor_io.hpp"

namespace unrn {
namespace {

void check_size(std::size_t got, std::size_t want, const std::string& what) {
  if (got != want) {
    throw DataError(what + ": expected " + std::to_string(want) + " values, got " +
                    std::to_string(got));
  }
}

void check_matrix(const Matrix& m, std::size_t r, std::size_t c, const std::string& what) {
  if (m.rows != r || m.cols != c || m.data.size() != r * c) {
    throw DataError(what + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                    ", got " + std::to_string(m.rows) + "x" + std::to_string(m.cols));
  }
}

void center_rows(Matrix& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    double mean = 0.0;
    for (float v : row) mean += v;
    mean /= static_cast<double>(row.size());
    for (float& v : row) v = static_cast<float>(v - mean);
  }
}

void center_columns(Matrix& m) {
  for (std::size_t c = 0; c < m.cols; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < m.rows; ++r) mean += m(r, c);
    mean /= static_cast<double>(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) m(r, c) = static_cast<float>(m(r, c) - mean);
  }
}

void center_vector(std::vector<float>& v) {
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (float& x : v) x = static_cast<float>(x - mean);
}

// reader: d_model x k, applied as LN(x) . reader + bias.
void fold_reader(const LayerNormParams& ln, Matrix& reader, std::vector<float>& bias) {
  const std::size_t d = reader.rows;
  for (std::size_t c = 0; c < reader.cols; ++c) {
    double shift = 0.0;
    for (std::size_t i = 0; i < d; ++i) shift += double{ln.b[i]} * reader(i, c);
    bias[c] = static_cast<float>(bias[c] + shift);
    for (std::size_t i = 0; i < d; ++i) reader(i, c) *= ln.w[i];
  }
  center_columns(reader);
}

void reset_norm(LayerNormParams& ln) {
  std::fill(ln.w.begin(), ln.w.end(), 1.0f);
  std::fill(ln.b.begin(), ln.b.end(), 0.0f);
}

std::string param_file(const std::string& name) { return name + ".tensor"; }

Tensor vector_tensor(const std::vector<float>& v) { return Tensor({v.size()}, v); }

Tensor stack_heads(const std::vector<Matrix>& heads) {
  Tensor t;
  t.shape = {heads.size(), heads.front().rows, heads.front().cols};
  for (const auto& h : heads) t.data.insert(t.data.end(), h.data.begin(), h.data.end());
  return t;
}

Tensor stack_vectors(const std::vector<std::vector<float>>& vs) {
  Tensor t;
  t.shape = {vs.size(), vs.front().size()};
  for (const auto& v : vs) t.data.insert(t.data.end(), v.begin(), v.end());
  return t;
}

class DirReader {
 public:
  explicit DirReader(std::filesystem::path dir) : dir_(std::move(dir)) {}

  bool has(const std::string& name) const {
    return std::filesystem::exists(dir_ / param_file(name));
  }

  Tensor get(const std::string& name, std::vector<std::uint64_t> shape) const {
    auto t = read_tensor(dir_ / param_file(name));
    if (t.shape != shape) {
      std::string want, got;
      for (auto d : shape) want += std::to_string(d) + " ";
      for (auto d : t.shape) got += std::to_string(d) + " ";
      throw DataError(name + ": expected shape [ " + want + "], got [ " + got + "]");
    }
    return t;
  }

  std::vector<float> vec(const std::string& name, std::size_t n) const {
    return get(name, {n}).data;
  }

  Matrix mat(const std::string& name, std::size_t r, std::size_t c) const {
    return to_matrix(get(name, {r, c}));
  }

  std::vector<Matrix> heads(const std::string& name, std::size_t h, std::size_t r,
                            std::size_t c) const {
    auto t = get(name, {h, r, c});
    std::vector<Matrix> out(h, Matrix(r, c));
    for (std::size_t i = 0; i < h; ++i) {
      std::copy_n(t.data.begin() + static_cast<std::ptrdiff_t>(i * r * c), r * c,
                  out[i].data.begin());
    }
    return out;
  }

  std::vector<std::vector<float>> vecs(const std::string& name, std::size_t h,
                                       std::size_t n) const {
    auto t = get(name, {h, n});
    std::vector<std::vector<float>> out(h);
    for (std::size_t i = 0; i < h; ++i) {
      out[i].assign(t.data.begin() + static_cast<std::ptrdiff_t>(i * n),
                    t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    }
    return out;
  }

  LayerNormParams norm(const std::string& prefix, std::size_t d, bool optional) const {
    if (optional && !has(prefix + ".w")) {
      return {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
    }
    return {vec(prefix + ".w", d), vec(prefix + ".b", d)};
  }

 private:
  std::filesystem::path dir_;
};

int parse_int(std::string_view s, const std::string& full) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || v < 0) {
    throw DataError("cannot parse index in '" + full + "'");
  }
  return v;
}

std::pair<int, int> parse_pair(const std::string& s, char inner_prefix) {
  std::string_view v(s);
  if (!v.empty() && (v[0] == 'L' || v[0] == 'l')) v.remove_prefix(1);
  const auto dot = v.find('.');
  if (dot == std::string_view::npos) throw DataError("expected L<layer>.<index>, got '" + s + "'");
  auto second = v.substr(dot + 1);
  if (!second.empty() && (second[0] == inner_prefix || second[0] == inner_prefix + 32)) {
    second.remove_prefix(1);
  }
  return {parse_int(v.substr(0, dot), s), parse_int(second, s)};
}

}  // namespace

std::string activation_name(Activation a) {
  return a == Activation::gelu_exact ? "gelu" : "gelu_new";
}

Activation parse_activation(const std::string& name) {
  if (name == "gelu_new" || name == "gelu_tanh_approx") return Activation::gelu_tanh_approx;
  if (name == "gelu" || name == "gelu_exact") return Activation::gelu_exact;
  throw DataError("unknown activation '" + name + "'");
}

void ModelConfig::validate() const {
  if (n_layer < 1 || n_head < 1 || d_model < 1 || d_mlp < 1 || d_vocab < 1 || n_ctx < 1) {
    throw DataError("model config counts must all be >= 1");
  }
  if (d_model % n_head != 0) throw DataError("d_model must be divisible by n_head");
  if (!(ln_eps > 0.0)) throw DataError("ln_eps must be positive");
}

void ModelWeights::validate() const {
  config.validate();
  const std::size_t d = config.d_model, dh = config.d_head(), nh = config.n_head,
                    m = config.d_mlp, v = config.d_vocab;
  check_matrix(W_E, v, d, "embed.W_E");
  check_matrix(W_pos, config.n_ctx, d, "pos_embed.W_pos");
  check_size(layers.size(), config.n_layer, "layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    check_size(L.ln1.w.size(), d, p + "ln1.w");
    check_size(L.ln1.b.size(), d, p + "ln1.b");
    check_size(L.ln2.w.size(), d, p + "ln2.w");
    check_size(L.ln2.b.size(), d, p + "ln2.b");
    for (auto* mats : {&L.W_Q, &L.W_K, &L.W_V}) {
      check_size(mats->size(), nh, p + "attn heads");
      for (const auto& h : *mats) check_matrix(h, d, dh, p + "attn.W_QKV");
    }
    check_size(L.W_O.size(), nh, p + "attn.W_O heads");
    for (const auto& h : L.W_O) check_matrix(h, dh, d, p + "attn.W_O");
    for (auto* bs : {&L.b_Q, &L.b_K, &L.b_V}) {
      check_size(bs->size(), nh, p + "attn bias heads");
      for (const auto& b : *bs) check_size(b.size(), dh, p + "attn.b_QKV");
    }
    check_size(L.b_O.size(), d, p + "attn.b_O");
    check_matrix(L.W_in, d, m, p + "mlp.W_in");
    check_size(L.b_in.size(), m, p + "mlp.b_in");
    check_matrix(L.W_out, m, d, p + "mlp.W_out");
    check_size(L.b_out.size(), d, p + "mlp.b_out");
  }
  check_size(ln_final.w.size(), d, "ln_final.w");
  check_size(ln_final.b.size(), d, "ln_final.b");
  check_matrix(W_U, d, v, "unembed.W_U");
  check_size(b_U.size(), v, "unembed.b_U");
}

std::vector<float> ModelWeights::w_in(int layer, int neuron) const {
  const auto& W = layers.at(static_cast<std::size_t>(layer)).W_in;
  std::vector<float> out(W.rows);
  for (std::size_t i = 0; i < W.rows; ++i) out[i] = W(i, static_cast<std::size_t>(neuron));
  return out;
}

std::vector<float> ModelWeights::w_out(int layer, int neuron) const {
  const auto row = layers.at(static_cast<std::size_t>(layer)).W_out.row(static_cast<std::size_t>(neuron));
  return {row.begin(), row.end()};
}

ModelWeights random_weights(const ModelConfig& cfg, std::uint64_t seed, double init_std) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](Matrix& m, std::size_t r, std::size_t c) {
    m = Matrix(r, c);
    for (auto& x : m.data) x = static_cast<float>(init_std * normal(rng));
  };
  const std::size_t d = cfg.d_model, dh = cfg.d_head(), nh = cfg.n_head, m = cfg.d_mlp,
                    v = cfg.d_vocab;
  ModelWeights w;
  w.config = cfg;
  fill(w.W_E, v, d);
  fill(w.W_pos, cfg.n_ctx, d);
  w.layers.resize(cfg.n_layer);
  for (auto& L : w.layers) {
    L.ln1 = {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
    L.ln2 = L.ln1;
    for (auto* mats : {&L.W_Q, &L.W_K, &L.W_V}) {
      mats->resize(nh);
      for (auto& h : *mats) fill(h, d, dh);
    }
    L.W_O.resize(nh);
    for (auto& h : L.W_O) fill(h, dh, d);
    L.b_Q.assign(nh, std::vector<float>(dh, 0.0f));
    L.b_K = L.b_Q;
    L.b_V = L.b_Q;
    L.b_O.assign(d, 0.0f);
    fill(L.W_in, d, m);
    L.b_in.assign(m, 0.0f);
    fill(L.W_out, m, d);
    L.b_out.assign(d, 0.0f);
  }
  w.ln_final = {std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)};
  if (cfg.tied_embeddings) {
    w.W_U = Matrix(d, v);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t t = 0; t < v; ++t) w.W_U(i, t) = w.W_E(t, i);
  } else {
    fill(w.W_U, d, v);
  }
  w.b_U.assign(v, 0.0f);
  return w;
}

ModelWeights fold_layer_norm(const ModelWeights& in) {
  in.validate();
  ModelWeights w = in;
  for (auto& L : w.layers) {
    for (std::size_t h = 0; h < L.W_Q.size(); ++h) {
      fold_reader(L.ln1, L.W_Q[h], L.b_Q[h]);
      fold_reader(L.ln1, L.W_K[h], L.b_K[h]);
      fold_reader(L.ln1, L.W_V[h], L.b_V[h]);
    }
    reset_norm(L.ln1);
    fold_reader(L.ln2, L.W_in, L.b_in);
    reset_norm(L.ln2);
  }
  fold_reader(w.ln_final, w.W_U, w.b_U);
  reset_norm(w.ln_final);
  return w;
}

ModelWeights center_writing_and_unembed(const ModelWeights& in) {
  in.validate();
  ModelWeights w = in;
  center_rows(w.W_E);
  center_rows(w.W_pos);
  for (auto& L : w.layers) {
    for (auto& h : L.W_O) center_rows(h);
    center_vector(L.b_O);
    center_rows(L.W_out);
    center_vector(L.b_out);
  }
  center_rows(w.W_U);
  center_vector(w.b_U);
  return w;
}

ModelWeights preprocess(const ModelWeights& w) {
  if (w.preprocessed) return w;
  auto out = center_writing_and_unembed(fold_layer_norm(w));
  out.preprocessed = true;
  return out;
}

ModelConfig read_config(const std::filesystem::path& config_json) {
  std::ifstream in(config_json);
  if (!in) throw DataError("cannot open " + config_json.string());
  ModelConfig c;
  try {
    const auto j = nlohmann::json::parse(in);
    c.n_layer = j.at("n_layer").get<int>();
    c.n_head = j.at("n_head").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.d_vocab = j.at("d_vocab").get<int>();
    c.n_ctx = j.at("n_ctx").get<int>();
    c.ln_eps = j.value("ln_eps", 1e-5);
    c.activation = parse_activation(j.value("activation", std::string("gelu_new")));
    c.tied_embeddings = j.value("tied_embeddings", false);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(config_json.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

ModelWeights load_model(const std::filesystem::path& dir) {
  ModelWeights w;
  w.config = read_config(dir / "config.json");
  {
    std::ifstream in(dir / "config.json");
    w.preprocessed = nlohmann::json::parse(in).value("preprocessed", false);
  }
  const auto& c = w.config;
  const std::size_t d = c.d_model, dh = c.d_head(), nh = c.n_head, m = c.d_mlp, v = c.d_vocab;
  const DirReader r(dir);
  const bool opt_norm = w.preprocessed;
  w.W_E = r.mat("embed.W_E", v, d);
  w.W_pos = r.mat("pos_embed.W_pos", c.n_ctx, d);
  w.layers.resize(c.n_layer);
  for (int l = 0; l < c.n_layer; ++l) {
    auto& L = w.layers[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    L.ln1 = r.norm(p + "ln1", d, opt_norm);
    L.W_Q = r.heads(p + "attn.W_Q", nh, d, dh);
    L.W_K = r.heads(p + "attn.W_K", nh, d, dh);
    L.W_V = r.heads(p + "attn.W_V", nh, d, dh);
    L.W_O = r.heads(p + "attn.W_O", nh, dh, d);
    L.b_Q = r.vecs(p + "attn.b_Q", nh, dh);
    L.b_K = r.vecs(p + "attn.b_K", nh, dh);
    L.b_V = r.vecs(p + "attn.b_V", nh, dh);
    L.b_O = r.vec(p + "attn.b_O", d);
    L.ln2 = r.norm(p + "ln2", d, opt_norm);
    L.W_in = r.mat(p + "mlp.W_in", d, m);
    L.b_in = r.vec(p + "mlp.b_in", m);
    L.W_out = r.mat(p + "mlp.W_out", m, d);
    L.b_out = r.vec(p + "mlp.b_out", d);
  }
  w.ln_final = r.norm("ln_final", d, opt_norm);
  if (r.has("unembed.W_U")) {
    w.W_U = r.mat("unembed.W_U", d, v);
  } else if (c.tied_embeddings) {
    w.W_U = Matrix(d, v);
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t t = 0; t < v; ++t) w.W_U(i, t) = w.W_E(t, i);
  } else {
    throw DataError("missing unembed.W_U and tied_embeddings is false");
  }
  w.b_U = r.has("unembed.b_U") ? r.vec("unembed.b_U", v) : std::vector<float>(v, 0.0f);
  w.validate();
  return w;
}

void save_model(const ModelWeights& w, const std::filesystem::path& dir) {
  w.validate();
  std::filesystem::create_directories(dir);
  const auto& c = w.config;
  nlohmann::ordered_json j;
  j["n_layer"] = c.n_layer;
  j["n_head"] = c.n_head;
  j["d_model"] = c.d_model;
  j["d_mlp"] = c.d_mlp;
  j["d_vocab"] = c.d_vocab;
  j["n_ctx"] = c.n_ctx;
  j["ln_eps"] = c.ln_eps;
  j["activation"] = activation_name(c.activation);
  j["tied_embeddings"] = c.tied_embeddings;
  j["preprocessed"] = w.preprocessed;
  {
    std::ofstream out(dir / "config.json");
    if (!out) throw DataError("cannot write " + (dir / "config.json").string());
    out << j.dump(2) << "\n";
  }
  auto put = [&](const std::string& name, const Tensor& t) {
    write_tensor(t, dir / param_file(name));
  };
  put("embed.W_E", to_tensor(w.W_E));
  put("pos_embed.W_pos", to_tensor(w.W_pos));
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    put(p + "ln1.w", vector_tensor(L.ln1.w));
    put(p + "ln1.b", vector_tensor(L.ln1.b));
    put(p + "attn.W_Q", stack_heads(L.W_Q));
    put(p + "attn.W_K", stack_heads(L.W_K));
    put(p + "attn.W_V", stack_heads(L.W_V));
    put(p + "attn.W_O", stack_heads(L.W_O));
    put(p + "attn.b_Q", stack_vectors(L.b_Q));
    put(p + "attn.b_K", stack_vectors(L.b_K));
    put(p + "attn.b_V", stack_vectors(L.b_V));
    put(p + "attn.b_O", vector_tensor(L.b_O));
    put(p + "ln2.w", vector_tensor(L.ln2.w));
    put(p + "ln2.b", vector_tensor(L.ln2.b));
    put(p + "mlp.W_in", to_tensor(L.W_in));
    put(p + "mlp.b_in", vector_tensor(L.b_in));
    put(p + "mlp.W_out", to_tensor(L.W_out));
    put(p + "mlp.b_out", vector_tensor(L.b_out));
  }
  put("ln_final.w", vector_tensor(w.ln_final.w));
  put("ln_final.b", vector_tensor(w.ln_final.b));
  put("unembed.W_U", to_tensor(w.W_U));
  put("unembed.b_U", vector_tensor(w.b_U));
}

NeuronId parse_neuron_id(const std::string& s) {
  auto [l, n] = parse_pair(s, 'N');
  return {l, n};
}

HeadId parse_head_id(const std::string& s) {
  auto [l, h] = parse_pair(s, 'H');
  return {l, h};
}

std::string to_string(NeuronId n) {
  return "L" + std::to_string(n.layer) + "." + std::to_string(n.index);
}

std::string to_string(HeadId h) {
  return "L" + std::to_string(h.layer) + ".H" + std::to_string(h.head);
}

}  // namespace unrn
