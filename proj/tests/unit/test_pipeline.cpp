#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "unrn/pipeline.hpp"

using namespace unrn;

namespace {

// Oracle activations: column-wise post-activations over every masked-in token.
std::vector<std::vector<double>> reference_columns(const ModelWeights& w, const MaskedTokens& d,
                                                   bool post) {
  const std::size_t M = w.config.d_mlp, L = w.config.n_layer;
  std::vector<std::vector<double>> cols(M * L);
  for (const auto& win : make_windows(d.stream)) {
    const auto toks = std::span(d.stream.tokens).subspan(win.begin, win.length);
    const auto ref = fixtures::reference_forward(w, toks);
    for (std::size_t t = 0; t < win.length; ++t) {
      if (!d.mask[win.begin + t]) continue;
      for (std::size_t l = 0; l < L; ++l) {
        for (std::size_t j = 0; j < M; ++j) {
          cols[l * M + j].push_back(post ? ref.mlp_post[l][t * M + j] : ref.mlp_pre[l][t * M + j]);
        }
      }
    }
  }
  return cols;
}

}  // namespace

TEST_CASE("neuron activations are layer-major") {
  const auto w = fixtures::random_full_model(fixtures::tiny_config(2, 2, 8, 4, 12, 8), 71);
  const std::vector<std::uint32_t> toks = {0, 3, 7, 11};
  const auto a = neuron_activations(w, toks, Hook::mlp_post);
  const auto ref = fixtures::reference_forward(w, toks);
  REQUIRE(a.rows == 4);
  REQUIRE(a.cols == 8);
  CHECK(a(2, 4 + 1) == doctest::Approx(ref.mlp_post[1][2 * 4 + 1]).epsilon(1e-5));
  CHECK(a(3, 2) == doctest::Approx(ref.mlp_post[0][3 * 4 + 2]).epsilon(1e-5));
  CHECK_THROWS_AS(neuron_activations(w, toks, Hook::resid_pre), DataError);
}

TEST_CASE("stream must fit the model") {
  const auto w = fixtures::random_full_model(fixtures::tiny_config(1, 1, 8, 4, 12, 8), 72);
  CHECK_THROWS_AS(check_stream_fits(w, fixtures::random_stream(1, 4, 16, 12, 1)), DataError);
  TokenStream big;
  big.context_length = 8;
  big.add_document(std::vector<std::uint32_t>{0, 12});
  CHECK_THROWS_AS(check_stream_fits(w, big), DataError);
  CHECK_NOTHROW(check_stream_fits(w, fixtures::random_stream(1, 4, 8, 12, 1)));
}

TEST_CASE("correlating two models") {
  const auto a = fixtures::random_full_model(fixtures::tiny_config(2, 2, 8, 4, 12, 8), 73);
  const auto b = fixtures::random_full_model(fixtures::tiny_config(2, 2, 8, 6, 12, 8), 74);
  auto data = fixtures::all_in(fixtures::random_stream(5, 13, 8, 12, 3));
  for (std::size_t t = 0; t < data.mask.size(); ++t) data.mask[t] = data.stream.tokens[t] != 0;

  CorrelateOptions opts;
  opts.baseline_seed = 5;
  opts.batch_windows = 2;
  const auto r = correlate_models(a, b, data, opts);
  CHECK(r.n_windows == 10);
  CHECK(r.n_tokens == 60);
  REQUIRE(r.corr.rows == 8);
  REQUIRE(r.corr.cols == 12);

  const auto ca = reference_columns(a, data, true);
  const auto cb = reference_columns(b, data, true);
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 12; ++j) {
      CHECK(r.corr(i, j) == doctest::Approx(fixtures::pearson(ca[i], cb[j])).epsilon(1e-4));
    }
  }

  // Baseline: model-b activations mixed by the layer's Gaussian matrix.
  const auto R = RotationBaseline::gaussian(2, 6, 5);
  for (std::size_t j = 0; j < 12; ++j) {
    const std::size_t l = j / 6, row = j % 6;
    std::vector<double> rot(cb[0].size(), 0.0);
    for (std::size_t k = 0; k < 6; ++k) {
      for (std::size_t t = 0; t < rot.size(); ++t) rot[t] += R.per_layer[l](row, k) * cb[l * 6 + k][t];
    }
    CHECK(r.baseline(3, j) == doctest::Approx(fixtures::pearson(ca[3], rot)).epsilon(1e-4));
  }

  opts.workers = 3;
  opts.tile_size = 3;
  opts.batch_windows = 7;
  const auto r2 = correlate_models(a, b, data, opts);
  CHECK(r2.corr == r.corr);
  CHECK(r2.baseline == r.baseline);

  opts.rotation = RotationBaseline::identity(2, 6);
  const auto r3 = correlate_models(a, b, data, opts);
  CHECK(r3.baseline == r3.corr);
  opts.rotation = RotationBaseline::identity(3, 6);
  CHECK_THROWS_AS(correlate_models(a, b, data, opts), DataError);
}

TEST_CASE("activation moments use pre-activations") {
  const auto w = fixtures::random_full_model(fixtures::tiny_config(2, 2, 8, 4, 12, 8), 75);
  auto data = fixtures::all_in(fixtures::random_stream(4, 10, 8, 12, 4));
  data.mask[3] = 0;
  const auto m = activation_moments(w, data, 2, 3);
  const auto cols = reference_columns(w, data, false);
  for (std::size_t j = 0; j < 8; ++j) {
    const auto got = finalize(m.states()[j]);
    const auto want = vector_moments(cols[j]);
    CHECK(got.mean == doctest::Approx(want.mean).epsilon(1e-5));
    CHECK(got.variance == doctest::Approx(want.variance).epsilon(1e-4));
    CHECK(got.kurtosis == doctest::Approx(want.kurtosis).epsilon(1e-4));
    CHECK(got.sparsity == want.sparsity);
  }
}

TEST_CASE("explaining neurons") {
  const auto w = fixtures::random_full_model(fixtures::tiny_config(2, 2, 8, 4, 12, 8), 76);
  auto data = fixtures::all_in(fixtures::random_stream(6, 20, 8, 12, 5));
  data.mask[9] = 0;
  std::vector<std::vector<std::uint8_t>> labels(2, std::vector<std::uint8_t>(data.stream.tokens.size()));
  for (std::size_t t = 0; t < data.stream.tokens.size(); ++t) {
    labels[0][t] = data.stream.tokens[t] % 3 == 0;
    labels[1][t] = 0;
  }
  ExplainOptions opts;
  opts.mi = {2, 4};
  opts.batch_windows = 4;
  const auto r = explain_neurons(w, data, labels, opts);
  CHECK(r.n_tokens == 119);
  // 6 documents of 20 tokens give two full windows each.
  CHECK(r.n_mi_windows == 12);
  REQUIRE(r.position.size() == 8);

  for (std::size_t j = 0; j < 8; ++j) {
    std::vector<float> col;
    for (const auto& win : make_windows(data.stream)) {
      const auto a = neuron_activations(w, std::span(data.stream.tokens).subspan(win.begin, win.length),
                                        Hook::mlp_post);
      for (std::size_t t = 0; t < win.length; ++t) col.push_back(a(t, j));
    }
    const auto want = reduction_in_variance(col, labels[0], data.mask);
    CHECK(r.riv[0][j].score == doctest::Approx(want.score).epsilon(1e-6));
    CHECK(r.riv[0][j].n_positive == want.n_positive);
    CHECK(r.riv[1][j].score == 0.0);
  }

  opts.workers = 3;
  opts.batch_windows = 1;
  const auto r2 = explain_neurons(w, data, labels, opts);
  CHECK(r2.position[5].mi == r.position[5].mi);
  CHECK(r2.riv[0][5].score == doctest::Approx(r.riv[0][5].score).epsilon(1e-12));

  opts.max_mi_windows = 1;
  CHECK(explain_neurons(w, data, labels, opts).position.empty());
  labels[0].pop_back();
  CHECK_THROWS_AS(explain_neurons(w, data, labels, opts), DataError);
}
