#include <doctest.h>

#include <cmath>
#include <fstream>

#include "fixtures.hpp"
#include "unrn/model.hpp"

using namespace unrn;
using fixtures::TempDir;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(double{a.data[i]} - b.data[i]));
  }
  return m;
}

double column_mean(const Matrix& m, std::size_t c) {
  double s = 0.0;
  for (std::size_t r = 0; r < m.rows; ++r) s += m(r, c);
  return s / static_cast<double>(m.rows);
}

double row_mean(std::span<const float> r) {
  double s = 0.0;
  for (float x : r) s += x;
  return s / static_cast<double>(r.size());
}

}  // namespace

TEST_CASE("config validation") {
  auto c = fixtures::tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_head = 3;
  CHECK_THROWS_AS(c.validate(), DataError);
  c = fixtures::tiny_config();
  c.d_mlp = 0;
  CHECK_THROWS_AS(c.validate(), DataError);
  CHECK(parse_activation("gelu_new") == Activation::gelu_tanh_approx);
  CHECK(parse_activation("gelu") == Activation::gelu_exact);
  CHECK_THROWS_AS(parse_activation("relu"), DataError);
}

TEST_CASE("neuron and head ids") {
  CHECK(parse_neuron_id("L23.945") == NeuronId{23, 945});
  CHECK(parse_neuron_id("3.7") == NeuronId{3, 7});
  CHECK(parse_head_id("L5.H0") == HeadId{5, 0});
  CHECK(parse_head_id("5.2") == HeadId{5, 2});
  CHECK(to_string(NeuronId{1, 5}) == "L1.5");
  CHECK(to_string(HeadId{1, 0}) == "L1.H0");
  CHECK_THROWS_AS(parse_neuron_id("L1"), DataError);
  CHECK_THROWS_AS(parse_neuron_id("La.3"), DataError);
  CHECK_THROWS_AS(parse_head_id("L1.H-1"), DataError);
}

TEST_CASE("model directory round trip") {
  TempDir dir;
  const auto w = fixtures::random_full_model(fixtures::tiny_config(), 3);
  save_model(w, dir.path());
  for (const char* f : {"config.json", "embed.W_E.tensor", "pos_embed.W_pos.tensor",
                        "blocks.1.attn.W_Q.tensor", "blocks.0.attn.b_O.tensor",
                        "blocks.0.ln2.w.tensor", "blocks.1.mlp.W_out.tensor", "ln_final.b.tensor",
                        "unembed.W_U.tensor", "unembed.b_U.tensor"}) {
    CHECK_MESSAGE(std::filesystem::exists(dir / f), f);
  }
  const auto back = load_model(dir.path());
  CHECK(back.W_E == w.W_E);
  CHECK(back.layers[1].W_Q == w.layers[1].W_Q);
  CHECK(back.layers[0].W_O == w.layers[0].W_O);
  CHECK(back.layers[1].b_K == w.layers[1].b_K);
  CHECK(back.layers[0].ln2.w == w.layers[0].ln2.w);
  CHECK(back.W_U == w.W_U);
  CHECK(back.b_U == w.b_U);
  CHECK_FALSE(back.preprocessed);

  SUBCASE("attention tensors are stored head-major") {
    const auto t = read_tensor(dir / "blocks.0.attn.W_O.tensor");
    CHECK(t.shape == std::vector<std::uint64_t>{2, 8, 16});
  }
  SUBCASE("a wrong shape is reported") {
    write_tensor(Tensor({3}, {1, 2, 3}), dir / "blocks.0.mlp.b_in.tensor");
    CHECK_THROWS_AS(load_model(dir.path()), DataError);
  }
  SUBCASE("a missing tensor is reported") {
    std::filesystem::remove(dir / "blocks.1.mlp.W_in.tensor");
    CHECK_THROWS_AS(load_model(dir.path()), DataError);
  }
  SUBCASE("b_U is optional") {
    std::filesystem::remove(dir / "unembed.b_U.tensor");
    const auto m = load_model(dir.path());
    CHECK(m.b_U == std::vector<float>(24, 0.0f));
  }
  SUBCASE("tied embeddings reuse W_E") {
    std::filesystem::remove(dir / "unembed.W_U.tensor");
    CHECK_THROWS_AS(load_model(dir.path()), DataError);
    auto c = w.config;
    c.tied_embeddings = true;
    auto tied = w;
    tied.config = c;
    save_model(tied, dir.path());
    std::filesystem::remove(dir / "unembed.W_U.tensor");
    const auto m = load_model(dir.path());
    CHECK(m.W_U(3, 7) == w.W_E(7, 3));
  }
}

TEST_CASE("preprocessed directories may omit layer norm tensors") {
  TempDir dir;
  const auto w = preprocess(fixtures::random_full_model(fixtures::tiny_config(), 4));
  save_model(w, dir.path());
  for (const char* f : {"blocks.0.ln1.w.tensor", "blocks.0.ln1.b.tensor", "blocks.1.ln2.w.tensor",
                        "blocks.1.ln2.b.tensor", "ln_final.w.tensor", "ln_final.b.tensor",
                        "blocks.0.ln2.w.tensor", "blocks.0.ln2.b.tensor", "blocks.1.ln1.w.tensor",
                        "blocks.1.ln1.b.tensor"}) {
    std::filesystem::remove(dir / f);
  }
  const auto back = load_model(dir.path());
  CHECK(back.preprocessed);
  CHECK(back.ln_final.w == std::vector<float>(16, 1.0f));
}

TEST_CASE("preprocessing puts weights in the canonical gauge") {
  const auto raw = fixtures::random_full_model(fixtures::tiny_config(), 5);
  const auto w = preprocess(raw);
  CHECK(w.preprocessed);
  for (const auto& L : w.layers) {
    CHECK(L.ln1.w == std::vector<float>(16, 1.0f));
    CHECK(L.ln2.b == std::vector<float>(16, 0.0f));
    for (std::size_t j = 0; j < L.W_in.cols; ++j) CHECK(std::abs(column_mean(L.W_in, j)) < 1e-6);
    for (std::size_t j = 0; j < L.W_Q[1].cols; ++j) {
      CHECK(std::abs(column_mean(L.W_Q[1], j)) < 1e-6);
    }
    for (std::size_t r = 0; r < L.W_out.rows; ++r) CHECK(std::abs(row_mean(L.W_out.row(r))) < 1e-6);
    CHECK(std::abs(row_mean(L.b_O)) < 1e-6);
  }
  for (std::size_t r = 0; r < w.W_E.rows; ++r) CHECK(std::abs(row_mean(w.W_E.row(r))) < 1e-6);
  // W_U: each residual coordinate is centered over the vocabulary.
  for (std::size_t i = 0; i < w.W_U.rows; ++i) CHECK(std::abs(row_mean(w.W_U.row(i))) < 1e-6);
  CHECK(std::abs(row_mean(w.b_U)) < 1e-6);

  // Already-preprocessed weights are returned unchanged.
  const auto again = preprocess(w);
  CHECK(max_abs_diff(again.W_U, w.W_U) == 0.0);
}

TEST_CASE("layer norm folding alone keeps the pre-activations") {
  const auto raw = fixtures::random_full_model(fixtures::tiny_config(), 6);
  const auto folded = fold_layer_norm(raw);
  const std::vector<std::uint32_t> toks = {0, 5, 9, 2, 17, 3};
  const auto a = fixtures::reference_forward(raw, toks);
  const auto b = fixtures::reference_forward(folded, toks);
  double m = 0.0;
  for (int l = 0; l < 2; ++l) {
    for (std::size_t i = 0; i < a.mlp_pre[l].size(); ++i) {
      m = std::max(m, std::abs(a.mlp_pre[l][i] - b.mlp_pre[l][i]));
    }
  }
  CHECK(m < 1e-4);
}
