#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <variant>
#include <vector>

#include "unrn/model.hpp"
#include "unrn/tensor_io.hpp"

namespace unrn {

void gelu_inplace(std::span<float> x, Activation kind);
float gelu(float x, Activation kind);

enum class Hook {
  resid_pre,       // [T, d_model] residual entering the block
  attn_pattern,    // [n_head, T, T] softmax pattern A[d][s]
  attn_v,          // [n_head, T, d_head] value vectors v_s
  head_out,        // [n_head, T, d_model] per-head output o_d = W_O sum_s A v_s
  resid_mid,       // [T, d_model] residual after attention
  mlp_pre,         // [T, d_mlp] w_in . x + b_in
  mlp_post,        // [T, d_mlp] activation (after interventions)
  resid_post,      // [T, d_model] residual leaving the block
  ln_final_scale,  // [T] sqrt(Var[x] + eps) of the final layer norm; layer -1
};

struct HookId {
  Hook kind;
  int layer = -1;
  auto operator<=>(const HookId&) const = default;
};

using HookSet = std::set<HookId>;
using HookTrace = std::map<HookId, Tensor>;

HookSet all_layers(Hook kind, int n_layer);

// Replaces a neuron's post-activation before it is multiplied by W_out.
// Empty positions means every position.
struct FixNeuron {
  NeuronId neuron;
  float value = 0.0f;
  std::vector<int> positions;
};

// Removes (post-activation x w_out) of a source neuron from the residual that
// feeds the query of one downstream head, at the listed destination positions.
// The head's key and value inputs, and every other head, are untouched.
struct PathAblate {
  NeuronId neuron;
  HeadId head;
  std::vector<int> positions;
};

using Intervention = std::variant<FixNeuron, PathAblate>;

struct ForwardOptions {
  HookSet hooks;
  std::vector<Intervention> interventions;
  bool compute_logits = true;
  // Layers after this one are skipped (only valid with compute_logits false).
  int last_layer = -1;
};

struct ForwardResult {
  Matrix logits;                 // T x d_vocab
  HookTrace trace;
  std::vector<double> entropy;   // per position, nats
  // loss[t] = -log p(tokens[t+1] | tokens[..t]); size T-1.
  std::vector<double> loss;
  // Rank of the true next token among the logits (1 = argmax); size T-1.
  std::vector<std::uint32_t> next_token_rank;
  std::vector<std::uint32_t> argmax;  // per position

  const Tensor& at(Hook kind, int layer = -1) const;
};

// Throws DataError on out-of-range tokens, too-long contexts or intervention
// indices out of bounds.
ForwardResult forward(const ModelWeights& w, std::span<const std::uint32_t> tokens,
                      const ForwardOptions& opts = {});

// Shannon entropy (nats) of softmax(logits).
double softmax_entropy(std::span<const float> logits);

// (x - mean) / sqrt(var + eps) * gamma + b; returns sqrt(var + eps).
double layer_norm(std::span<const float> x, const LayerNormParams& ln, double eps,
                  std::span<float> out);

}  // namespace unrn
