#include "unrn/interventions.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "unrn/neuron_stats.hpp"

namespace unrn {
namespace {

double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError("bad number '" + s + "' in value grid");
  }
  if (used != s.size() || !std::isfinite(v)) throw DataError("bad number '" + s + "' in value grid");
  return v;
}

std::span<const std::uint32_t> window_tokens(const TokenStream& s, const Window& w) {
  return std::span<const std::uint32_t>(s.tokens).subspan(w.begin, w.length);
}

std::span<const std::uint8_t> window_mask(const MaskedTokens& d, const Window& w) {
  return std::span<const std::uint8_t>(d.mask).subspan(w.begin, w.length);
}

struct EntropySums {
  double scale = 0.0, entropy = 0.0, agree = 0.0, positions = 0.0;
  double loss = 0.0, rr = 0.0, next = 0.0;

  void add(const EntropySums& o) {
    scale += o.scale;
    entropy += o.entropy;
    agree += o.agree;
    positions += o.positions;
    loss += o.loss;
    rr += o.rr;
    next += o.next;
  }
};

EntropySums window_sums(const ForwardResult& r, std::span<const std::uint8_t> mask,
                        const std::vector<std::uint32_t>* clean_argmax) {
  EntropySums s;
  const auto& scale = r.at(Hook::ln_final_scale).data;
  const std::size_t T = mask.size();
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    s.scale += scale[t];
    s.entropy += r.entropy[t];
    s.positions += 1.0;
    if (clean_argmax && (*clean_argmax)[t] == r.argmax[t]) s.agree += 1.0;
    if (t + 1 < T && mask[t + 1]) {
      s.loss += r.loss[t];
      s.rr += 1.0 / r.next_token_rank[t];
      s.next += 1.0;
    }
  }
  return s;
}

EntropyPoint to_point(const EntropySums& s, double value) {
  EntropyPoint p;
  p.value = value;
  if (s.positions > 0) {
    p.ln_scale = s.scale / s.positions;
    p.entropy = s.entropy / s.positions;
    p.argmax_agreement = s.agree / s.positions;
  }
  if (s.next > 0) {
    p.loss = s.loss / s.next;
    p.reciprocal_rank = s.rr / s.next;
  }
  return p;
}

double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// |z W_O| for a d_head vector z and a d_head x d_model matrix.
double output_norm(std::span<const float> z, const Matrix& W_O) {
  double sq = 0.0;
  for (std::size_t j = 0; j < W_O.cols; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < W_O.rows; ++i) acc += double{z[i]} * W_O(i, j);
    sq += acc * acc;
  }
  return std::sqrt(sq);
}

std::mt19937_64 seeded(std::uint64_t seed, std::uint32_t a, std::uint32_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), a, b};
  return std::mt19937_64(seq);
}

}  // namespace

std::vector<double> parse_value_grid(const std::string& spec) {
  std::vector<double> grid;
  if (spec.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw DataError("value grid must look like lo:hi:n, got '" + spec + "'");
    const double lo = parse_double(parts[0]), hi = parse_double(parts[1]);
    const double n = parse_double(parts[2]);
    if (n < 1 || n != std::floor(n)) throw DataError("value grid needs a positive point count");
    const int count = static_cast<int>(n);
    for (int i = 0; i < count; ++i) {
      grid.push_back(count == 1 ? lo : lo + (hi - lo) * i / (count - 1));
    }
  } else {
    std::stringstream ss(spec);
    for (std::string p; std::getline(ss, p, ',');) grid.push_back(parse_double(p));
  }
  if (grid.empty()) throw DataError("empty value grid");
  std::sort(grid.begin(), grid.end());
  return grid;
}

std::vector<Window> select_windows(const TokenStream& s, std::size_t max_windows) {
  auto windows = make_windows(s);
  if (max_windows > 0 && windows.size() > max_windows) windows.resize(max_windows);
  return windows;
}

EntropyCurve entropy_curve(const ModelWeights& w, const MaskedTokens& data,
                           const std::vector<Window>& windows, NeuronId neuron,
                           std::span<const double> grid, int workers) {
  const auto& c = w.config;
  if (neuron.layer < 0 || neuron.layer >= c.n_layer || neuron.index < 0 ||
      neuron.index >= c.d_mlp) {
    throw DataError("neuron " + to_string(neuron) + " out of range");
  }
  std::vector<EntropySums> clean(windows.size());
  std::vector<std::vector<EntropySums>> fixed(windows.size(), std::vector<EntropySums>(grid.size()));
  parallel_for(windows.size(), workers, [&](std::size_t i) {
    const auto tokens = window_tokens(data.stream, windows[i]);
    const auto mask = window_mask(data, windows[i]);
    ForwardOptions opts;
    opts.hooks = {{Hook::ln_final_scale, -1}};
    const auto base = forward(w, tokens, opts);
    clean[i] = window_sums(base, mask, &base.argmax);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      opts.interventions = {FixNeuron{neuron, static_cast<float>(grid[g]), {}}};
      fixed[i][g] = window_sums(forward(w, tokens, opts), mask, &base.argmax);
    }
  });

  EntropySums total_clean;
  std::vector<EntropySums> totals(grid.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    total_clean.add(clean[i]);
    for (std::size_t g = 0; g < grid.size(); ++g) totals[g].add(fixed[i][g]);
  }
  EntropyCurve curve;
  curve.neuron = neuron;
  curve.clean = to_point(total_clean, kUndefined);
  curve.clean.reciprocal_rank_shift = 0.0;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    auto p = to_point(totals[g], grid[g]);
    p.reciprocal_rank_shift = p.reciprocal_rank - curve.clean.reciprocal_rank;
    curve.points.push_back(p);
  }
  return curve;
}

std::vector<NeuronId> select_control_neurons(const ModelWeights& w, NeuronId target, int count,
                                             std::uint64_t seed) {
  const auto& c = w.config;
  const int first = std::max(0, c.n_layer - 2);
  const auto summaries = weight_summaries(w);
  std::vector<const WeightSummary*> pool;
  for (const auto& s : summaries) {
    if (s.layer < first) continue;
    if (s.layer == target.layer && s.index == target.index) continue;
    pool.push_back(&s);
  }
  std::vector<double> penalty, logit_var;
  for (const auto* s : pool) {
    penalty.push_back(s->weight_penalty);
    logit_var.push_back(s->logit_var);
  }
  std::sort(penalty.begin(), penalty.end());
  std::sort(logit_var.begin(), logit_var.end());
  const double n = static_cast<double>(pool.size());
  auto fraction_below = [n](const std::vector<double>& sorted, double v) {
    return static_cast<double>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin()) / n;
  };
  std::vector<NeuronId> eligible;
  for (const auto* s : pool) {
    if (fraction_below(penalty, s->weight_penalty) >= 0.9) continue;
    if (!is_defined(s->logit_var) || fraction_below(logit_var, s->logit_var) < 0.1) continue;
    eligible.push_back({s->layer, s->index});
  }
  auto rng = seeded(seed, 0xC0u);
  const std::size_t k = std::min<std::size_t>(eligible.size(), static_cast<std::size_t>(std::max(0, count)));
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }
  eligible.resize(k);
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

EntropyExperimentResult entropy_intervention(const ModelWeights& w, const MaskedTokens& data,
                                             NeuronId neuron, const EntropyOptions& opts) {
  if (opts.grid.empty()) throw DataError("empty value grid");
  EntropyExperimentResult r;
  r.grid = opts.grid;
  std::sort(r.grid.begin(), r.grid.end());
  const auto windows = select_windows(data.stream, opts.max_windows);
  if (windows.empty()) throw DataError("no token windows");
  r.target = entropy_curve(w, data, windows, neuron, r.grid, opts.workers);
  if (opts.n_controls > 0) {
    for (const auto& ctl : select_control_neurons(w, neuron, opts.n_controls, opts.seed)) {
      r.controls.push_back(entropy_curve(w, data, windows, ctl, r.grid, opts.workers));
    }
  }
  return r;
}

std::vector<double> bos_key(const ModelWeights& w, std::uint32_t bos_token, HeadId head) {
  const auto& c = w.config;
  if (head.layer < 0 || head.layer >= c.n_layer || head.head < 0 || head.head >= c.n_head) {
    throw DataError("head " + to_string(head) + " out of range");
  }
  ForwardOptions opts;
  opts.hooks = {{Hook::resid_pre, head.layer}};
  opts.compute_logits = false;
  opts.last_layer = head.layer;
  const std::uint32_t tok[1] = {bos_token};
  const auto r = forward(w, tok, opts);
  const auto& resid = r.at(Hook::resid_pre, head.layer).data;
  const auto& L = w.layers[head.layer];
  std::vector<float> x(c.d_model);
  layer_norm(resid, L.ln1, c.ln_eps, x);
  const auto& WK = L.W_K[head.head];
  std::vector<double> k(WK.cols);
  for (std::size_t j = 0; j < WK.cols; ++j) {
    double acc = L.b_K[head.head][j];
    for (std::size_t i = 0; i < WK.rows; ++i) acc += double{x[i]} * WK(i, j);
    k[j] = acc;
  }
  return k;
}

std::vector<double> bos_query_direction(const ModelWeights& w, std::uint32_t bos_token,
                                        HeadId head) {
  const auto k = bos_key(w, bos_token, head);
  const auto& WQ = w.layers[head.layer].W_Q[head.head];
  std::vector<double> g(WQ.rows, 0.0);
  for (std::size_t i = 0; i < WQ.rows; ++i) {
    for (std::size_t j = 0; j < WQ.cols; ++j) g[i] += double{WQ(i, j)} * k[j];
  }
  return g;
}

BosScoreTable bos_heuristic_scores(const ModelWeights& w, std::uint32_t bos_token,
                                   std::span<const NeuronId> neurons, int n_baseline,
                                   std::uint64_t seed) {
  const auto& c = w.config;
  BosScoreTable table;
  table.seed = seed;
  std::vector<NeuronId> sources(neurons.begin(), neurons.end());
  if (sources.empty()) {
    for (int l = 0; l < c.n_layer; ++l) {
      for (int j = 0; j < c.d_mlp; ++j) sources.push_back({l, j});
    }
  }
  // Unit output directions, computed once per neuron.
  std::vector<std::vector<double>> unit(sources.size());
  for (std::size_t s = 0; s < sources.size(); ++s) {
    const auto& n = sources[s];
    if (n.layer < 0 || n.layer >= c.n_layer || n.index < 0 || n.index >= c.d_mlp) {
      throw DataError("neuron " + to_string(n) + " out of range");
    }
    const auto wo = w.w_out(n.layer, n.index);
    unit[s].assign(wo.begin(), wo.end());
    const double nrm = norm_of(unit[s]);
    for (auto& x : unit[s]) x = nrm > 0.0 ? x / nrm : 0.0;
  }
  for (int l = 1; l < c.n_layer; ++l) {
    for (int h = 0; h < c.n_head; ++h) {
      const HeadId head{l, h};
      const auto g = bos_query_direction(w, bos_token, head);
      for (std::size_t s = 0; s < sources.size(); ++s) {
        if (sources[s].layer >= l) continue;
        double score = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) score += unit[s][i] * g[i];
        table.entries.push_back({sources[s], head, score});
      }
      auto rng = seeded(seed, static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(h));
      std::normal_distribution<double> normal(0.0, 1.0);
      auto& base = table.baseline[head];
      std::vector<double> dir(g.size());
      for (int b = 0; b < n_baseline; ++b) {
        for (auto& x : dir) x = normal(rng);
        const double nrm = norm_of(dir);
        double score = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) score += dir[i] / nrm * g[i];
        base.push_back(score);
      }
    }
  }
  return table;
}

ValueNormReport bos_value_norm_ratio(const ModelWeights& w, const MaskedTokens& data,
                                     std::uint32_t bos_token, std::size_t max_windows,
                                     int workers) {
  const auto& c = w.config;
  ForwardOptions opts;
  opts.hooks = all_layers(Hook::attn_v, c.n_layer);
  opts.compute_logits = false;
  const std::size_t H = c.n_head, dh = c.d_head();

  const std::uint32_t tok[1] = {bos_token};
  const auto bos_run = forward(w, tok, opts);

  const auto windows = select_windows(data.stream, max_windows);
  // Per window: summed norms and counts for every (layer, head).
  std::vector<std::vector<double>> sums(windows.size(), std::vector<double>(c.n_layer * H, 0.0));
  std::vector<double> counts(windows.size(), 0.0);
  parallel_for(windows.size(), workers, [&](std::size_t i) {
    const auto tokens = window_tokens(data.stream, windows[i]);
    const auto mask = window_mask(data, windows[i]);
    const auto r = forward(w, tokens, opts);
    const std::size_t T = tokens.size();
    for (std::size_t t = 0; t < T; ++t) {
      if (!mask[t] || tokens[t] == bos_token) continue;
      counts[i] += 1.0;
      for (int l = 0; l < c.n_layer; ++l) {
        const auto& v = r.at(Hook::attn_v, l).data;
        for (std::size_t h = 0; h < H; ++h) {
          const std::span<const float> z(v.data() + (h * T + t) * dh, dh);
          sums[i][l * H + h] += output_norm(z, w.layers[l].W_O[h]);
        }
      }
    }
  });
  double n_tokens = 0.0;
  std::vector<double> total(c.n_layer * H, 0.0);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    n_tokens += counts[i];
    for (std::size_t k = 0; k < total.size(); ++k) total[k] += sums[i][k];
  }
  if (n_tokens == 0.0) throw DataError("no non-BOS tokens to average value norms over");

  ValueNormReport rep;
  std::vector<double> ratios;
  for (int l = 0; l < c.n_layer; ++l) {
    const auto& v = bos_run.at(Hook::attn_v, l).data;
    for (std::size_t h = 0; h < H; ++h) {
      HeadValueNorm hv;
      hv.head = {l, static_cast<int>(h)};
      hv.bos_norm = output_norm(std::span<const float>(v.data() + h * dh, dh), w.layers[l].W_O[h]);
      hv.mean_other_norm = total[l * H + h] / n_tokens;
      hv.ratio = hv.bos_norm > 0.0 ? hv.mean_other_norm / hv.bos_norm
                                   : std::numeric_limits<double>::infinity();
      ratios.push_back(hv.ratio);
      rep.heads.push_back(hv);
    }
  }
  std::sort(ratios.begin(), ratios.end());
  const std::size_t m = ratios.size();
  rep.median_ratio = m % 2 ? ratios[m / 2] : 0.5 * (ratios[m / 2 - 1] + ratios[m / 2]);
  return rep;
}

PathAblationResult path_ablation(const ModelWeights& w, const MaskedTokens& data, NeuronId neuron,
                                 HeadId head, std::size_t n_samples, std::uint64_t seed,
                                 int workers) {
  const auto& c = w.config;
  if (neuron.layer < 0 || neuron.layer >= c.n_layer || neuron.index < 0 ||
      neuron.index >= c.d_mlp) {
    throw DataError("neuron " + to_string(neuron) + " out of range");
  }
  if (head.layer < 0 || head.layer >= c.n_layer || head.head < 0 || head.head >= c.n_head) {
    throw DataError("head " + to_string(head) + " out of range");
  }
  if (neuron.layer >= head.layer) {
    throw DataError("neuron " + to_string(neuron) + " must sit before head " + to_string(head));
  }
  if (n_samples == 0) throw DataError("path ablation needs at least one sample");

  const auto windows = make_windows(data.stream);
  std::vector<std::pair<std::size_t, int>> candidates;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto mask = window_mask(data, windows[i]);
    const std::size_t start = std::max<std::size_t>(1, windows[i].length / 2);
    for (std::size_t t = start; t < windows[i].length; ++t) {
      if (mask[t]) candidates.emplace_back(i, static_cast<int>(t));
    }
  }
  if (candidates.empty()) throw DataError("no destination positions to sample");
  auto rng = seeded(seed, 0xAB1Au);
  const std::size_t k = std::min(n_samples, candidates.size());
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
    std::swap(candidates[i], candidates[pick(rng)]);
  }
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());

  // Group sampled positions by window.
  std::vector<std::size_t> group_window;
  std::vector<std::vector<int>> group_pos;
  for (const auto& [win, pos] : candidates) {
    if (group_window.empty() || group_window.back() != win) {
      group_window.push_back(win);
      group_pos.emplace_back();
    }
    group_pos.back().push_back(pos);
  }

  std::vector<std::vector<PathSample>> per_group(group_window.size());
  parallel_for(group_window.size(), workers, [&](std::size_t g) {
    const auto& win = windows[group_window[g]];
    const auto tokens = window_tokens(data.stream, win);
    const std::size_t T = tokens.size(), d = c.d_model;
    ForwardOptions opts;
    opts.hooks = {{Hook::attn_pattern, head.layer}, {Hook::head_out, head.layer},
                  {Hook::mlp_post, neuron.layer}};
    opts.compute_logits = false;
    opts.last_layer = head.layer;
    const auto clean = forward(w, tokens, opts);
    opts.interventions = {PathAblate{neuron, head, group_pos[g]}};
    const auto ablated = forward(w, tokens, opts);

    const auto& act = clean.at(Hook::mlp_post, neuron.layer).data;
    const auto& pc = clean.at(Hook::attn_pattern, head.layer).data;
    const auto& pa = ablated.at(Hook::attn_pattern, head.layer).data;
    const auto& oc = clean.at(Hook::head_out, head.layer).data;
    const auto& oa = ablated.at(Hook::head_out, head.layer).data;
    const std::size_t h = head.head;
    auto od_norm = [&](const std::vector<float>& o, std::size_t t) {
      double s = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double x = o[(h * T + t) * d + i];
        s += x * x;
      }
      return std::sqrt(s);
    };
    for (int pos : group_pos[g]) {
      const std::size_t t = pos;
      PathSample s;
      s.window = group_window[g];
      s.position = pos;
      s.activation = act[t * c.d_mlp + neuron.index];
      s.bos_attention_clean = pc[(h * T + t) * T];
      s.bos_attention_ablated = pa[(h * T + t) * T];
      s.od_norm_clean = od_norm(oc, t);
      s.od_norm_ablated = od_norm(oa, t);
      per_group[g].push_back(s);
    }
  });

  PathAblationResult r;
  r.neuron = neuron;
  r.head = head;
  r.seed = seed;
  double positive = 0.0, bos_down = 0.0, norm_up = 0.0;
  for (auto& group : per_group) {
    for (auto& s : group) {
      if (s.activation > 0.0) {
        positive += 1.0;
        if (s.delta_bos_attention() < 0.0) bos_down += 1.0;
        if (s.delta_od_norm() > 0.0) norm_up += 1.0;
      }
      r.samples.push_back(s);
    }
  }
  if (positive > 0.0) {
    r.fraction_bos_decrease = bos_down / positive;
    r.fraction_norm_increase = norm_up / positive;
  }
  return r;
}

}  // namespace unrn
