#pragma once

// GPT2-style decoder weights and the preprocessing that puts them into a
// canonical gauge: layer-norm affine parameters folded into the reading
// weights, reading weights centered along the residual dimension, writing
// weights centered, and the unembedding centered across the vocabulary.
//
// Model directory layout: config.json plus one tensor file per parameter,
// named "<parameter>.tensor" (see README for the full table).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "unrn/common.hpp"

namespace unrn {

enum class Activation { gelu_tanh_approx, gelu_exact };

std::string activation_name(Activation a);
Activation parse_activation(const std::string& name);

struct ModelConfig {
  int n_layer = 1;
  int n_head = 1;
  int d_model = 8;
  int d_mlp = 32;
  int d_vocab = 16;
  int n_ctx = 32;
  double ln_eps = 1e-5;
  Activation activation = Activation::gelu_tanh_approx;
  bool tied_embeddings = false;

  int d_head() const { return d_model / n_head; }
  int n_neurons() const { return n_layer * d_mlp; }

  // Throws DataError on counts < 1 or d_model not divisible by n_head.
  void validate() const;
};

struct LayerNormParams {
  std::vector<float> w;  // gamma
  std::vector<float> b;
};

struct LayerWeights {
  LayerNormParams ln1;
  // One matrix per head. W_Q/W_K/W_V: d_model x d_head; W_O: d_head x d_model.
  std::vector<Matrix> W_Q, W_K, W_V, W_O;
  std::vector<std::vector<float>> b_Q, b_K, b_V;  // per head, d_head
  std::vector<float> b_O;                         // d_model
  LayerNormParams ln2;
  Matrix W_in;                // d_model x d_mlp; column j is neuron j's input weight
  std::vector<float> b_in;    // d_mlp
  Matrix W_out;               // d_mlp x d_model; row j is neuron j's output weight
  std::vector<float> b_out;   // d_model
};

struct ModelWeights {
  ModelConfig config;
  Matrix W_E;    // d_vocab x d_model
  Matrix W_pos;  // n_ctx x d_model
  std::vector<LayerWeights> layers;
  LayerNormParams ln_final;
  Matrix W_U;               // d_model x d_vocab
  std::vector<float> b_U;   // d_vocab
  bool preprocessed = false;

  // Throws DataError if any tensor disagrees with config.
  void validate() const;

  std::vector<float> w_in(int layer, int neuron) const;
  std::vector<float> w_out(int layer, int neuron) const;
};

// Identity layer norms, zero biases, N(0, init_std^2) matrices.
ModelWeights random_weights(const ModelConfig& cfg, std::uint64_t seed,
                            double init_std = 0.2);

// W_eff = W diag(gamma), b_eff = b_read + W^T b_ln for every reader of a layer
// norm (attention Q/K/V, MLP input, unembedding), then centers each reading
// weight along the residual dimension. Layer norms become gamma = 1, b = 0.
ModelWeights fold_layer_norm(const ModelWeights& w);

// Removes the mean over the residual dimension from every writing weight and
// bias (embeddings, W_O, b_O, W_out, b_out) and subtracts, for each residual
// coordinate, the mean over the vocabulary from W_U (and the mean of b_U).
ModelWeights center_writing_and_unembed(const ModelWeights& w);

// fold_layer_norm followed by center_writing_and_unembed; a no-op if the
// weights are already marked preprocessed.
ModelWeights preprocess(const ModelWeights& w);

ModelWeights load_model(const std::filesystem::path& dir);
void save_model(const ModelWeights& w, const std::filesystem::path& dir);

ModelConfig read_config(const std::filesystem::path& config_json);

// Neuron and head addressing: "L23.945" / "23.945" and "L5.H0" / "5.0".
struct NeuronId {
  int layer = 0;
  int index = 0;
  auto operator<=>(const NeuronId&) const = default;
};
struct HeadId {
  int layer = 0;
  int head = 0;
  auto operator<=>(const HeadId&) const = default;
};

NeuronId parse_neuron_id(const std::string& s);
HeadId parse_head_id(const std::string& s);
std::string to_string(NeuronId n);
std::string to_string(HeadId h);

}  // namespace unrn
