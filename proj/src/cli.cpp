#include "unrn/cli.hpp"

#include <algorithm>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "cli_util.hpp"
#include "unrn/corr.hpp"
#include "unrn/interventions.hpp"
#include "unrn/model.hpp"
#include "unrn/neuron_stats.hpp"
#include "unrn/pipeline.hpp"
#include "unrn/taxonomy.hpp"
#include "unrn/tensor_io.hpp"

namespace fs = std::filesystem;

namespace unrn {
namespace cli {

// ------------------------------------------------------------ helpers

double CsvTable::number(std::size_t row, const std::string& name) const {
  const auto& s = text(row, name);
  if (s == "nan" || s.empty()) return kUndefined;
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw DataError("column " + name + " holds a non-number '" + s + "'");
  }
}

const std::string& CsvTable::text(std::size_t row, const std::string& name) const {
  const int c = column(name);
  if (c < 0) throw DataError("missing CSV column " + name);
  if (static_cast<std::size_t>(c) >= rows.at(row).size()) throw DataError("short CSV row");
  return rows[row][c];
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  CsvTable t;
  std::vector<std::string> cells;
  std::string field;
  bool quoted = false, any = false;
  auto end_row = [&] {
    cells.push_back(field);
    field.clear();
    if (t.header.empty()) t.header = cells;
    else t.rows.push_back(cells);
    cells.clear();
    any = false;
  };
  char c;
  while (in.get(c)) {
    any = true;
    if (quoted) {
      if (c == '"') {
        if (in.peek() == '"') {
          field += '"';
          in.get(c);
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(field);
      field.clear();
    } else if (c == '\n') {
      end_row();
    } else {
      field += c;
    }
  }
  if (any) end_row();
  return t;
}

void write_json(const nlohmann::ordered_json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Manifest::Manifest(fs::path dir, std::string command, std::vector<std::string> args)
    : dir_(std::move(dir)), start_(std::chrono::steady_clock::now()) {
  j_["toolkit_version"] = kToolkitVersion;
  j_["command"] = std::move(command);
  j_["arguments"] = std::move(args);
  j_["inputs"] = nlohmann::ordered_json::object();
  j_["seeds"] = nlohmann::ordered_json::object();
  j_["thresholds"] = nlohmann::ordered_json::object();
  j_["token_counts"] = nlohmann::ordered_json::object();
  j_["outputs"] = nlohmann::ordered_json::array();
  j_["status"] = "running";
}

void Manifest::output(const std::string& file) { j_["outputs"].push_back(file); }

void Manifest::begin() {
  fs::create_directories(dir_);
  write_json(j_, dir_ / "manifest.json");
}

void Manifest::finish() {
  j_["status"] = "complete";
  j_["wall_time_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  write_json(j_, dir_ / "manifest.json");
}

}  // namespace cli

namespace {

using cli::CsvWriter;
using cli::Manifest;

struct Context {
  std::vector<std::string> args;
  int workers = 1;
  std::ostream* out = &std::cout;
};

ModelWeights load_prepared(const fs::path& dir) { return preprocess(load_model(dir)); }

ExclusionSet load_exclusions(const std::string& flag, const fs::path& model_dir) {
  if (!flag.empty()) return read_exclusions(flag);
  const auto p = model_dir / "exclusions.json";
  if (fs::exists(p)) return read_exclusions(p);
  return {};
}

MaskedTokens load_tokens(const fs::path& path, const ExclusionSet& ex, const ModelWeights& w) {
  auto data = read_token_stream(path, ex, static_cast<std::uint32_t>(w.config.d_vocab));
  check_stream_fits(w, data.stream);
  return data;
}

nlohmann::ordered_json exclusion_json(const ExclusionSet& ex) {
  nlohmann::ordered_json j;
  j["excluded_token_ids"] = std::vector<std::uint32_t>(ex.excluded_token_ids.begin(),
                                                       ex.excluded_token_ids.end());
  if (ex.bos_token_id) j["bos_token_id"] = *ex.bos_token_id;
  return j;
}

std::uint64_t masked_count(const MaskedTokens& d) {
  return static_cast<std::uint64_t>(std::count(d.mask.begin(), d.mask.end(), std::uint8_t{1}));
}

Tensor matrix_d_tensor(const MatrixD& m) {
  std::vector<float> data(m.data.begin(), m.data.end());
  return Tensor({m.rows, m.cols}, std::move(data));
}

MatrixD tensor_matrix_d(const Tensor& t) {
  if (t.shape.size() != 2) throw DataError("expected a 2-d tensor");
  MatrixD m(t.shape[0], t.shape[1]);
  std::copy(t.data.begin(), t.data.end(), m.data.begin());
  return m;
}

std::string neuron_name(std::int64_t global, int d_mlp) {
  if (global < 0) return "";
  return to_string(NeuronId{static_cast<int>(global / d_mlp), static_cast<int>(global % d_mlp)});
}

nlohmann::ordered_json layout_json(const ModelConfig& c) {
  return {{"n_layer", c.n_layer}, {"d_mlp", c.d_mlp}};
}

LayerLayout layout_from(const nlohmann::json& j) {
  LayerLayout l;
  l.n_layer = j.at("n_layer").get<int>();
  l.d_mlp = j.at("d_mlp").get<int>();
  if (l.n_layer < 1 || l.d_mlp < 1) throw DataError("bad layer layout");
  return l;
}

// Value at rank floor(p/100 * (n-1)) of the sorted defined values.
double percentile_value(std::vector<double> v, double p) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return kUndefined;
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::floor(p / 100.0 * static_cast<double>(v.size() - 1)));
  return v[std::min(k, v.size() - 1)];
}

// ------------------------------------------------------------ correlate

struct CorrelateArgs {
  std::string model_a, model_b, tokens, exclusions, out;
  std::uint64_t baseline_seed = 0;
  std::size_t tile_size = 64;
  double threshold = 0.5;
};

void run_correlate(const CorrelateArgs& a, const Context& ctx) {
  const auto A = load_prepared(a.model_a);
  const auto B = load_prepared(a.model_b);
  if (A.config.d_vocab != B.config.d_vocab) throw DataError("models disagree on d_vocab");
  const auto ex = load_exclusions(a.exclusions, a.model_a);
  const auto data = load_tokens(a.tokens, ex, A);
  check_stream_fits(B, data.stream);

  const fs::path out = a.out;
  Manifest m(out, "correlate", ctx.args);
  m.inputs() = {{"model_a", a.model_a}, {"model_b", a.model_b}, {"tokens", a.tokens},
                {"exclusions", exclusion_json(ex)}};
  m.seeds()["baseline"] = a.baseline_seed;
  m.thresholds()["excess"] = a.threshold;
  m.counts()["tokens"] = data.stream.tokens.size();
  m.counts()["masked_in"] = masked_count(data);
  for (const char* f : {"corr.tensor", "baseline.tensor", "summary.csv", "correlation.json"}) m.output(f);
  m.begin();

  CorrelateOptions opts;
  opts.baseline_seed = a.baseline_seed;
  opts.tile_size = a.tile_size;
  opts.workers = ctx.workers;
  const auto r = correlate_models(A, B, data, opts);
  write_tensor(matrix_d_tensor(r.corr), out / "corr.tensor");
  write_tensor(matrix_d_tensor(r.baseline), out / "baseline.tensor");

  const MatrixD corr[1] = {r.corr}, base[1] = {r.baseline};
  const auto records = summarize_universality(corr, base, a.threshold);
  CsvWriter csv(out / "summary.csv", {"neuron", "layer", "index", "max_corr", "argmax",
                                      "baseline_max", "excess", "is_universal"});
  const int ma = A.config.d_mlp, mb = B.config.d_mlp;
  for (const auto& rec : records) {
    csv.row(neuron_name(rec.neuron, ma), rec.neuron / ma, rec.neuron % ma, rec.max_corr[0],
            neuron_name(rec.argmax[0], mb), rec.baseline_max[0], rec.excess, rec.is_universal);
  }

  nlohmann::ordered_json meta;
  meta["model_a"] = a.model_a;
  meta["model_b"] = a.model_b;
  meta["layout_a"] = layout_json(A.config);
  meta["layout_b"] = layout_json(B.config);
  meta["activation"] = "mlp_post";
  meta["baseline"] = {{"kind", "gaussian_rotation"}, {"seed", r.baseline_seed}};
  meta["n_tokens"] = r.n_tokens;
  meta["n_windows"] = r.n_windows;
  meta["tile_size"] = a.tile_size;
  meta["exclusions"] = exclusion_json(ex);
  cli::write_json(meta, out / "correlation.json");
  m.finish();
  *ctx.out << "correlated " << r.n_tokens << " tokens; "
           << std::count_if(records.begin(), records.end(), [](const auto& x) { return x.is_universal; })
           << " of " << records.size() << " neurons above excess " << a.threshold << "\n";
}

// --------------------------------------------------------- universality

struct UniversalityArgs {
  std::vector<std::string> corr_dirs;
  double threshold = 0.5;
  std::string out;
};

void run_universality(const UniversalityArgs& a, const Context& ctx) {
  std::vector<MatrixD> corr, base;
  std::optional<LayerLayout> ref, cmp;
  bool same_cmp = true;
  for (const auto& d : a.corr_dirs) {
    const auto meta = cli::read_json(fs::path(d) / "correlation.json");
    const auto la = layout_from(meta.at("layout_a"));
    const auto lb = layout_from(meta.at("layout_b"));
    if (ref && (ref->n_layer != la.n_layer || ref->d_mlp != la.d_mlp)) {
      throw DataError(d + ": reference model differs from the first correlation run");
    }
    if (cmp && (cmp->n_layer != lb.n_layer || cmp->d_mlp != lb.d_mlp)) same_cmp = false;
    ref = la;
    if (!cmp) cmp = lb;
    corr.push_back(tensor_matrix_d(read_tensor(fs::path(d) / "corr.tensor")));
    base.push_back(tensor_matrix_d(read_tensor(fs::path(d) / "baseline.tensor")));
    if (corr.back().rows != static_cast<std::size_t>(la.n_layer * la.d_mlp) ||
        corr.back().cols != static_cast<std::size_t>(lb.n_layer * lb.d_mlp) ||
        base.back().rows != corr.back().rows || base.back().cols != corr.back().cols) {
      throw DataError(d + ": correlation tensors do not match the recorded layouts");
    }
  }
  const fs::path out = a.out;
  Manifest m(out, "universality", ctx.args);
  m.inputs()["corr"] = a.corr_dirs;
  m.thresholds()["excess"] = a.threshold;
  m.output("universality.csv");
  if (same_cmp) m.output("depth_specialization.csv");
  m.begin();

  const auto records = summarize_universality(corr, base, a.threshold);
  std::vector<std::string> header = {"neuron", "layer", "index"};
  for (std::size_t k = 0; k < corr.size(); ++k) {
    const auto s = std::to_string(k);
    header.insert(header.end(), {"max_corr_" + s, "argmax_" + s, "baseline_max_" + s});
  }
  header.insert(header.end(), {"mean_max", "mean_baseline", "excess", "max_max", "min_max",
                               "is_universal"});
  CsvWriter csv(out / "universality.csv", header);
  for (const auto& r : records) {
    std::vector<std::string> cells = {neuron_name(r.neuron, ref->d_mlp),
                                      cli::cell(r.neuron / ref->d_mlp),
                                      cli::cell(r.neuron % ref->d_mlp)};
    for (std::size_t k = 0; k < corr.size(); ++k) {
      cells.push_back(cli::cell(r.max_corr[k]));
      cells.push_back(neuron_name(r.argmax[k], cmp->d_mlp));
      cells.push_back(cli::cell(r.baseline_max[k]));
    }
    for (double v : {r.mean_max, r.mean_baseline, r.excess, r.max_max, r.min_max}) {
      cells.push_back(cli::cell(v));
    }
    cells.push_back(cli::cell(r.is_universal));
    csv.write_cells(cells);
  }
  if (same_cmp) {
    const auto P = depth_specialization(records, *ref, *cmp);
    std::vector<std::string> h = {"layer"};
    for (int l = 0; l < cmp->n_layer; ++l) h.push_back("L" + std::to_string(l));
    CsvWriter dcsv(out / "depth_specialization.csv", h);
    for (int l = 0; l < ref->n_layer; ++l) {
      std::vector<std::string> cells = {cli::cell(l)};
      for (int lp = 0; lp < cmp->n_layer; ++lp) cells.push_back(cli::cell(P(l, lp)));
      dcsv.write_cells(cells);
    }
  }
  m.finish();
  *ctx.out << std::count_if(records.begin(), records.end(), [](const auto& r) { return r.is_universal; })
           << " universal neurons of " << records.size() << "\n";
}

// ----------------------------------------------------------------- stats

struct StatsArgs {
  std::string model, tokens, exclusions, universality, out;
};

void run_stats(const StatsArgs& a, const Context& ctx) {
  const auto w = load_prepared(a.model);
  const auto ex = load_exclusions(a.exclusions, a.model);
  const auto data = load_tokens(a.tokens, ex, w);
  std::map<std::string, bool> universal;
  if (!a.universality.empty()) {
    const auto t = cli::read_csv(a.universality);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      universal[t.text(i, "neuron")] = t.text(i, "is_universal") == "1";
    }
  }
  const fs::path out = a.out;
  Manifest m(out, "stats", ctx.args);
  m.inputs() = {{"model", a.model}, {"tokens", a.tokens}, {"exclusions", exclusion_json(ex)}};
  if (!a.universality.empty()) m.inputs()["universality"] = a.universality;
  m.counts()["tokens"] = data.stream.tokens.size();
  m.counts()["masked_in"] = masked_count(data);
  m.output("stats.csv");
  m.begin();

  const auto moments = activation_moments(w, data, ctx.workers);
  const auto weights = weight_summaries(w, ctx.workers);
  const std::size_t N = weights.size();
  std::vector<Moments> fin(N);
  for (std::size_t g = 0; g < N; ++g) fin[g] = finalize(moments.states()[g]);

  const std::vector<std::string> metrics = {"mean", "skew", "kurtosis", "sparsity", "b_in",
                                            "cos_in_out", "weight_penalty", "vocab_var",
                                            "vocab_skew", "vocab_kurt"};
  auto metric = [&](std::size_t g, const std::string& name) {
    const auto& s = weights[g];
    const auto& f = fin[g];
    if (name == "mean") return f.mean;
    if (name == "skew") return f.skew;
    if (name == "kurtosis") return f.kurtosis;
    if (name == "sparsity") return f.sparsity;
    if (name == "b_in") return s.b_in;
    if (name == "cos_in_out") return s.cos_in_out;
    if (name == "weight_penalty") return s.weight_penalty;
    if (name == "vocab_var") return s.vocab_var;
    if (name == "vocab_skew") return s.vocab_skew;
    return s.vocab_kurt;
  };
  LayerPercentileTable table;
  for (std::size_t g = 0; g < N; ++g) {
    for (const auto& name : metrics) table.add(weights[g].layer, name, metric(g, name));
  }
  table.build();

  std::vector<std::string> header = {"neuron", "layer", "index", "mean", "variance", "skew",
                                     "kurtosis", "sparsity", "b_in", "cos_in_out",
                                     "weight_penalty", "w_out_norm", "vocab_var", "vocab_skew",
                                     "vocab_kurt", "logit_var"};
  for (const auto& name : metrics) header.push_back("pct_" + name);
  if (!universal.empty()) header.push_back("is_universal");
  CsvWriter csv(out / "stats.csv", header);
  for (std::size_t g = 0; g < N; ++g) {
    const auto& s = weights[g];
    const auto& f = fin[g];
    const auto name = to_string(NeuronId{s.layer, s.index});
    std::vector<std::string> cells = {name, cli::cell(s.layer), cli::cell(s.index)};
    for (double v : {f.mean, f.variance, f.skew, f.kurtosis, f.sparsity, s.b_in, s.cos_in_out,
                     s.weight_penalty, s.w_out_norm, s.vocab_var, s.vocab_skew, s.vocab_kurt,
                     s.logit_var}) {
      cells.push_back(cli::cell(v));
    }
    for (const auto& mname : metrics) {
      cells.push_back(cli::cell(table.percentile(s.layer, mname, metric(g, mname))));
    }
    if (!universal.empty()) {
      auto it = universal.find(name);
      cells.push_back(cli::cell(it != universal.end() && it->second));
    }
    csv.write_cells(cells);
  }
  m.finish();
  *ctx.out << "wrote statistics for " << N << " neurons\n";
}

// --------------------------------------------------------------- explain

struct ExplainArgs {
  std::string model, tokens, exclusions, tests, vocab, out;
  int activation_bins = 16, position_bins = 32;
  std::size_t max_mi_windows = 4096;
};

Vocabulary load_vocab(const std::string& flag, const fs::path& model_dir) {
  return Vocabulary::read(flag.empty() ? model_dir / "vocab.json" : fs::path(flag));
}

void run_explain(const ExplainArgs& a, const Context& ctx) {
  const auto w = load_prepared(a.model);
  const auto ex = load_exclusions(a.exclusions, a.model);
  const auto data = load_tokens(a.tokens, ex, w);
  const auto vocab = load_vocab(a.vocab, a.model);
  if (vocab.size() != static_cast<std::size_t>(w.config.d_vocab)) {
    throw DataError("vocabulary has " + std::to_string(vocab.size()) + " tokens, model has " +
                    std::to_string(w.config.d_vocab));
  }
  const auto suite = read_test_suite(a.tests);
  std::vector<std::vector<std::uint8_t>> labels;
  for (const auto& spec : suite) labels.push_back(generate_labels(spec, data.stream, vocab));

  const fs::path out = a.out;
  Manifest m(out, "explain", ctx.args);
  m.inputs() = {{"model", a.model}, {"tokens", a.tokens}, {"tests", a.tests},
                {"exclusions", exclusion_json(ex)}};
  m.thresholds()["activation_bins"] = a.activation_bins;
  m.thresholds()["position_bins"] = a.position_bins;
  m.counts()["tokens"] = data.stream.tokens.size();
  m.counts()["masked_in"] = masked_count(data);
  for (const char* f : {"explanations.csv", "best_explanations.csv", "position.csv",
                        "position_profile.csv", "explain.json"}) {
    m.output(f);
  }
  m.begin();

  ExplainOptions opts;
  opts.mi = {a.activation_bins, a.position_bins};
  opts.max_mi_windows = a.max_mi_windows;
  opts.workers = ctx.workers;
  const auto r = explain_neurons(w, data, labels, opts);
  const int M = w.config.d_mlp;
  const std::size_t N = w.config.n_neurons();

  CsvWriter csv(out / "explanations.csv", {"neuron", "layer", "index", "test", "riv", "beta",
                                           "n_positive", "degenerate"});
  CsvWriter best(out / "best_explanations.csv", {"neuron", "layer", "index", "test", "riv", "beta"});
  for (std::size_t j = 0; j < N; ++j) {
    const auto name = neuron_name(static_cast<std::int64_t>(j), M);
    std::int64_t arg = -1;
    for (std::size_t k = 0; k < suite.size(); ++k) {
      const auto& s = r.riv[k][j];
      csv.row(name, j / M, j % M, suite[k].id, s.score, s.beta, s.n_positive, s.degenerate);
      if (is_defined(s.score) && (arg < 0 || s.score > r.riv[arg][j].score)) arg = static_cast<std::int64_t>(k);
    }
    if (arg >= 0) best.row(name, j / M, j % M, suite[arg].id, r.riv[arg][j].score, r.riv[arg][j].beta);
    else best.row(name, j / M, j % M, "", kUndefined, kUndefined);
  }
  CsvWriter pos(out / "position.csv", {"neuron", "layer", "index", "mi"});
  CsvWriter prof(out / "position_profile.csv", {"neuron", "position", "mean", "std"});
  for (std::size_t j = 0; j < N; ++j) {
    const auto name = neuron_name(static_cast<std::int64_t>(j), M);
    pos.row(name, j / M, j % M, r.position.empty() ? kUndefined : r.position[j].mi);
    if (r.position.empty()) continue;
    for (std::size_t t = 0; t < r.position[j].mean_by_position.size(); ++t) {
      prof.row(name, t, r.position[j].mean_by_position[t], r.position[j].std_by_position[t]);
    }
  }
  nlohmann::ordered_json meta;
  meta["n_tests"] = suite.size();
  meta["n_tokens"] = r.n_tokens;
  meta["activation"] = "mlp_post";
  meta["mi_windows"] = r.n_mi_windows;
  meta["mi_activation_bins"] = a.activation_bins;
  meta["mi_position_bins"] = a.position_bins;
  meta["mi_computed"] = !r.position.empty();
  cli::write_json(meta, out / "explain.json");
  m.finish();
  *ctx.out << "scored " << N << " neurons against " << suite.size() << " tests\n";
}

// ------------------------------------------------------------- make-tests

struct MakeTestsArgs {
  std::string vocab, tokens, out;
  int top_k = 40;
};

void run_make_tests(const MakeTestsArgs& a, const Context& ctx) {
  const auto vocab = Vocabulary::read(a.vocab);
  const auto data = read_token_stream(a.tokens, {}, static_cast<std::uint32_t>(vocab.size()));
  const fs::path out = a.out;
  Manifest m(out, "make-tests", ctx.args);
  m.inputs() = {{"vocab", a.vocab}, {"tokens", a.tokens}};
  m.output("tests.json");
  m.begin();
  const auto suite = default_test_suite(vocab, data.stream, a.top_k);
  write_test_suite(suite, out / "tests.json");
  m.finish();
  *ctx.out << "wrote " << suite.size() << " tests\n";
}

// ----------------------------------------------------------- vocab-effects

struct VocabArgs {
  std::string model, out;
  double kurtosis = 10.0;
  double variance_percentile = 99.0;
};

void run_vocab_effects(const VocabArgs& a, const Context& ctx) {
  const auto w = load_prepared(a.model);
  const fs::path out = a.out;
  Manifest m(out, "vocab-effects", ctx.args);
  m.inputs()["model"] = a.model;
  m.thresholds()["kurtosis"] = a.kurtosis;
  m.thresholds()["partition_variance_percentile"] = a.variance_percentile;
  m.output("vocab_effects.csv");
  m.output("neighbors.csv");
  m.begin();

  const auto& c = w.config;
  const std::size_t N = c.n_neurons();
  std::vector<std::vector<double>> effects(N);
  parallel_for(N, ctx.workers, [&](std::size_t g) {
    effects[g] = vocab_cosines(w, static_cast<int>(g) / c.d_mlp, static_cast<int>(g) % c.d_mlp);
  });
  std::vector<double> variance(N);
  for (std::size_t g = 0; g < N; ++g) variance[g] = vector_moments(effects[g]).variance;
  std::vector<double> cutoff(c.n_layer);
  for (int l = 0; l < c.n_layer; ++l) {
    cutoff[l] = percentile_value(std::vector<double>(variance.begin() + l * c.d_mlp,
                                                     variance.begin() + (l + 1) * c.d_mlp),
                                 a.variance_percentile);
  }
  CsvWriter csv(out / "vocab_effects.csv", {"neuron", "layer", "index", "class", "variance",
                                            "skew", "kurtosis", "variance_cutoff",
                                            "kurtosis_threshold"});
  for (std::size_t g = 0; g < N; ++g) {
    const int l = static_cast<int>(g) / c.d_mlp;
    VocabEffectClass cls;
    if (std::all_of(effects[g].begin(), effects[g].end(), is_defined)) {
      cls = classify_vocab_effect(effects[g], {a.kurtosis, cutoff[l]});
    }
    csv.row(neuron_name(g, c.d_mlp), l, g % c.d_mlp, vocab_class_name(cls.cls), cls.variance,
            cls.skew, cls.kurtosis, cutoff[l], a.kurtosis);
  }
  const auto in = nearest_weight_neighbor(w, WeightBasis::input, ctx.workers);
  const auto outn = nearest_weight_neighbor(w, WeightBasis::output, ctx.workers);
  CsvWriter ncsv(out / "neighbors.csv",
                 {"neuron", "layer", "index", "in_max_cos", "in_max_neuron", "in_min_cos",
                  "in_min_neuron", "out_max_cos", "out_max_neuron", "out_min_cos", "out_min_neuron"});
  for (std::size_t g = 0; g < N; ++g) {
    ncsv.row(neuron_name(g, c.d_mlp), g / c.d_mlp, g % c.d_mlp, in[g].max_cos,
             neuron_name(in[g].argmax, c.d_mlp), in[g].min_cos, neuron_name(in[g].argmin, c.d_mlp),
             outn[g].max_cos, neuron_name(outn[g].argmax, c.d_mlp), outn[g].min_cos,
             neuron_name(outn[g].argmin, c.d_mlp));
  }
  m.finish();
  *ctx.out << "classified " << N << " neurons\n";
}

// ------------------------------------------------------- intervene-entropy

struct EntropyArgs {
  std::string model, tokens, exclusions, neuron, grid = "-2:10:11", out;
  int controls = 20;
  std::uint64_t seed = 0;
  std::size_t max_windows = 64;
};

void write_curve(CsvWriter& csv, const std::string& role, const EntropyCurve& c) {
  const auto name = to_string(c.neuron);
  auto row = [&](const std::string& setting, const EntropyPoint& p) {
    csv.row(role, name, setting, p.value, p.ln_scale, p.entropy, p.loss, p.reciprocal_rank,
            p.reciprocal_rank_shift, p.argmax_agreement);
  };
  row("clean", c.clean);
  for (const auto& p : c.points) row("fixed", p);
}

nlohmann::ordered_json point_json(const EntropyPoint& p) {
  return {{"value", p.value}, {"ln_scale", p.ln_scale}, {"entropy", p.entropy},
          {"loss", p.loss}, {"reciprocal_rank", p.reciprocal_rank},
          {"reciprocal_rank_shift", p.reciprocal_rank_shift},
          {"argmax_agreement", p.argmax_agreement}};
}

nlohmann::ordered_json curve_json(const EntropyCurve& c) {
  nlohmann::ordered_json j;
  j["neuron"] = to_string(c.neuron);
  auto clean = point_json(c.clean);
  clean.erase("value");
  j["clean"] = clean;
  j["points"] = nlohmann::ordered_json::array();
  for (const auto& p : c.points) j["points"].push_back(point_json(p));
  return j;
}

void run_entropy(const EntropyArgs& a, const Context& ctx) {
  const auto w = load_prepared(a.model);
  const auto ex = load_exclusions(a.exclusions, a.model);
  const auto data = load_tokens(a.tokens, ex, w);
  const auto neuron = parse_neuron_id(a.neuron);
  EntropyOptions opts;
  opts.grid = parse_value_grid(a.grid);
  opts.n_controls = a.controls;
  opts.seed = a.seed;
  opts.max_windows = a.max_windows;
  opts.workers = ctx.workers;

  const fs::path out = a.out;
  Manifest m(out, "intervene-entropy", ctx.args);
  m.inputs() = {{"model", a.model}, {"tokens", a.tokens}, {"neuron", a.neuron},
                {"grid", a.grid}, {"exclusions", exclusion_json(ex)}};
  m.seeds()["controls"] = a.seed;
  m.counts()["tokens"] = data.stream.tokens.size();
  m.output("entropy.csv");
  m.output("entropy.json");
  m.begin();

  const auto r = entropy_intervention(w, data, neuron, opts);
  CsvWriter csv(out / "entropy.csv", {"role", "neuron", "setting", "value", "ln_scale", "entropy",
                                      "loss", "reciprocal_rank", "reciprocal_rank_shift",
                                      "argmax_agreement"});
  write_curve(csv, "target", r.target);
  for (const auto& c : r.controls) write_curve(csv, "control", c);

  nlohmann::ordered_json j;
  j["grid"] = r.grid;
  j["max_windows"] = a.max_windows;
  j["target"] = curve_json(r.target);
  j["controls"] = nlohmann::ordered_json::array();
  for (const auto& c : r.controls) j["controls"].push_back(curve_json(c));
  cli::write_json(j, out / "entropy.json");
  m.finish();
  *ctx.out << "swept " << to_string(neuron) << " over " << r.grid.size() << " values with "
           << r.controls.size() << " controls\n";
}

// ------------------------------------------------------------- ablate-bos

struct AblateArgs {
  std::string model, tokens, exclusions, neuron, head, out;
  std::size_t samples = 256;
  std::uint64_t seed = 0;
  std::int64_t bos = -1;
  int baseline_directions = 1000;
  std::size_t max_windows = 64;
};

void run_ablate(const AblateArgs& a, const Context& ctx) {
  const auto w = load_prepared(a.model);
  const auto ex = load_exclusions(a.exclusions, a.model);
  const auto data = load_tokens(a.tokens, ex, w);
  const auto neuron = parse_neuron_id(a.neuron);
  const auto head = parse_head_id(a.head);
  std::uint32_t bos = 0;
  if (a.bos >= 0) bos = static_cast<std::uint32_t>(a.bos);
  else if (ex.bos_token_id) bos = *ex.bos_token_id;
  else throw DataError("no BOS token id: pass --bos or set bos_token_id in the exclusions file");
  if (bos >= static_cast<std::uint32_t>(w.config.d_vocab)) throw DataError("BOS id out of range");

  const fs::path out = a.out;
  Manifest m(out, "ablate-bos", ctx.args);
  m.inputs() = {{"model", a.model}, {"tokens", a.tokens}, {"neuron", a.neuron}, {"head", a.head},
                {"bos_token_id", bos}, {"exclusions", exclusion_json(ex)}};
  m.seeds()["samples"] = a.seed;
  m.seeds()["baseline_directions"] = a.seed;
  m.counts()["tokens"] = data.stream.tokens.size();
  for (const char* f : {"path_ablation.csv", "bos_scores.csv", "value_norms.csv", "ablate_bos.json"}) {
    m.output(f);
  }
  m.begin();

  const auto pa = path_ablation(w, data, neuron, head, a.samples, a.seed, ctx.workers);
  CsvWriter csv(out / "path_ablation.csv",
                {"window", "position", "activation", "bos_attention_clean", "bos_attention_ablated",
                 "delta_bos_attention", "od_norm_clean", "od_norm_ablated", "delta_od_norm"});
  for (const auto& s : pa.samples) {
    csv.row(s.window, s.position, s.activation, s.bos_attention_clean, s.bos_attention_ablated,
            s.delta_bos_attention(), s.od_norm_clean, s.od_norm_ablated, s.delta_od_norm());
  }

  const NeuronId one[1] = {neuron};
  const auto scores = bos_heuristic_scores(w, bos, one, a.baseline_directions, a.seed);
  CsvWriter scsv(out / "bos_scores.csv", {"neuron", "head", "score", "baseline_mean",
                                          "baseline_std", "baseline_fraction_below"});
  double target_score = kUndefined;
  for (const auto& e : scores.entries) {
    const auto& b = scores.baseline.at(e.head);
    const auto mom = vector_moments(b);
    const double below = static_cast<double>(std::count_if(b.begin(), b.end(), [&](double x) { return x < e.score; }));
    scsv.row(to_string(e.neuron), to_string(e.head), e.score, mom.mean, std::sqrt(mom.variance),
             b.empty() ? kUndefined : below / static_cast<double>(b.size()));
    if (e.head == head) target_score = e.score;
  }

  const auto vn = bos_value_norm_ratio(w, data, bos, a.max_windows, ctx.workers);
  CsvWriter vcsv(out / "value_norms.csv", {"head", "bos_norm", "mean_other_norm", "ratio"});
  for (const auto& h : vn.heads) vcsv.row(to_string(h.head), h.bos_norm, h.mean_other_norm, h.ratio);

  nlohmann::ordered_json j;
  j["neuron"] = a.neuron;
  j["head"] = a.head;
  j["bos_token_id"] = bos;
  j["heuristic_score"] = target_score;
  j["samples"] = pa.samples.size();
  j["fraction_bos_attention_decrease"] = pa.fraction_bos_decrease;
  j["fraction_od_norm_increase"] = pa.fraction_norm_increase;
  j["median_value_norm_ratio"] = vn.median_ratio;
  cli::write_json(j, out / "ablate_bos.json");
  m.finish();
  *ctx.out << "ablated " << pa.samples.size() << " destinations; h_n = " << format_number(target_score)
           << "\n";
}

// ----------------------------------------------------------------- report

struct ReportArgs {
  std::string in, out;
};

void run_report(const ReportArgs& a, const Context& ctx) {
  const fs::path out = a.out;
  Manifest m(out, "report", ctx.args);
  m.inputs()["in"] = a.in;
  m.begin();
  const auto tables = write_report(a.in, out);
  for (const auto& t : tables) m.output(t);
  m.finish();
  *ctx.out << "wrote " << tables.size() << " report tables\n";
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 0;
  int layers = 2, heads = 2, d_model = 16, d_mlp = 32, vocab = 64, ctx = 64;
  int documents = 32, doc_length = 128;
  double init_std = 0.2;
};

std::vector<std::string> synthetic_vocab(int size) {
  std::vector<std::string> v = {"<|endoftext|>", "\n"};
  for (const char* s : {" the", " on", "on", "ward", "c", "e", ",", ".", " The", "ABC", "42", " a",
                        "a", " of", "ing", " 7", "(", ")", " and", "s"}) {
    v.push_back(s);
  }
  for (char ch = 'b'; ch <= 'z'; ++ch) {
    v.push_back(std::string(1, ch));
    v.push_back(std::string(" ") + ch);
  }
  for (int i = 0; static_cast<int>(v.size()) < size; ++i) v.push_back(" w" + std::to_string(i));
  v.resize(size);
  return v;
}

void run_synth(const SynthArgs& a, const Context& ctx) {
  if (a.vocab < 3) throw DataError("synthetic vocabulary needs at least 3 tokens");
  ModelConfig cfg;
  cfg.n_layer = a.layers;
  cfg.n_head = a.heads;
  cfg.d_model = a.d_model;
  cfg.d_mlp = a.d_mlp;
  cfg.d_vocab = a.vocab;
  cfg.n_ctx = a.ctx;
  cfg.validate();
  const fs::path out = a.out;
  Manifest m(out, "synth", ctx.args);
  m.seeds()["weights"] = a.seed;
  m.seeds()["tokens"] = a.seed;
  for (const char* f : {"config.json", "vocab.json", "exclusions.json", "tokens.bin"}) m.output(f);
  m.begin();

  const auto w = random_weights(cfg, a.seed, a.init_std);
  save_model(w, out);
  Vocabulary{synthetic_vocab(a.vocab)}.write(out / "vocab.json");
  ExclusionSet ex;
  ex.excluded_token_ids = {0, 1};
  ex.bos_token_id = 0;
  write_exclusions(ex, out / "exclusions.json");

  std::mt19937_64 rng(a.seed ^ 0x5EEDu);
  std::uniform_int_distribution<std::uint32_t> pick(2, static_cast<std::uint32_t>(a.vocab - 1));
  TokenStream s;
  s.context_length = static_cast<std::uint32_t>(a.ctx);
  std::vector<std::uint32_t> doc;
  for (int d = 0; d < a.documents; ++d) {
    doc.assign(1, 0);
    for (int t = 1; t < a.doc_length; ++t) doc.push_back(pick(rng));
    s.add_document(doc);
  }
  write_token_stream(s, out / "tokens.bin");
  m.counts()["tokens"] = s.tokens.size();
  m.finish();
  *ctx.out << "wrote synthetic model and " << s.tokens.size() << " tokens to " << a.out << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Neuron universality and taxonomy toolkit", "unrn"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kToolkitVersion);
  Context ctx;
  ctx.args = args;
  ctx.out = &out;
  ctx.workers = default_workers();
  app.add_option("--workers", ctx.workers, "worker threads (default: UNRN_WORKERS or 1)")
      ->check(CLI::Range(1, 1024));

  CorrelateArgs ca;
  auto* correlate = app.add_subcommand("correlate", "correlate neuron activations of two models");
  correlate->add_option("--model-a", ca.model_a, "reference model directory")->required();
  correlate->add_option("--model-b", ca.model_b, "comparison model directory")->required();
  correlate->add_option("--tokens", ca.tokens, "token stream file")->required();
  correlate->add_option("--exclusions", ca.exclusions, "exclusion JSON (default: <model-a>/exclusions.json)");
  correlate->add_option("--baseline-seed", ca.baseline_seed, "seed of the rotation baseline");
  correlate->add_option("--tile-size", ca.tile_size, "neurons per correlation tile")->check(CLI::PositiveNumber);
  correlate->add_option("--threshold", ca.threshold, "excess correlation threshold");
  correlate->add_option("--out", ca.out, "output directory")->required();

  UniversalityArgs ua;
  auto* universality = app.add_subcommand("universality", "excess correlation over comparison models");
  universality->add_option("--corr", ua.corr_dirs, "correlate output directories")->required();
  universality->add_option("--threshold", ua.threshold, "excess correlation threshold");
  universality->add_option("--out", ua.out, "output directory")->required();

  StatsArgs sa;
  auto* stats = app.add_subcommand("stats", "activation and weight statistics per neuron");
  stats->add_option("--model", sa.model)->required();
  stats->add_option("--tokens", sa.tokens)->required();
  stats->add_option("--exclusions", sa.exclusions);
  stats->add_option("--universality", sa.universality, "universality.csv for the is_universal column");
  stats->add_option("--out", sa.out)->required();

  ExplainArgs ea;
  auto* explain = app.add_subcommand("explain", "reduction in variance and position MI");
  explain->add_option("--model", ea.model)->required();
  explain->add_option("--tokens", ea.tokens)->required();
  explain->add_option("--tests", ea.tests, "test-suite JSON")->required();
  explain->add_option("--vocab", ea.vocab, "vocabulary JSON (default: <model>/vocab.json)");
  explain->add_option("--exclusions", ea.exclusions);
  explain->add_option("--activation-bins", ea.activation_bins)->check(CLI::Range(2, 4096));
  explain->add_option("--position-bins", ea.position_bins)->check(CLI::Range(1, 4096));
  explain->add_option("--max-mi-windows", ea.max_mi_windows);
  explain->add_option("--out", ea.out)->required();

  MakeTestsArgs ma;
  auto* make_tests = app.add_subcommand("make-tests", "write the default label test suite");
  make_tests->add_option("--vocab", ma.vocab)->required();
  make_tests->add_option("--tokens", ma.tokens)->required();
  make_tests->add_option("--top-k", ma.top_k, "frequent unigrams to include")->check(CLI::NonNegativeNumber);
  make_tests->add_option("--out", ma.out)->required();

  VocabArgs va;
  auto* vocab = app.add_subcommand("vocab-effects", "prediction/suppression/partition classes");
  vocab->add_option("--model", va.model)->required();
  vocab->add_option("--kurtosis", va.kurtosis, "kurtosis threshold");
  vocab->add_option("--variance-percentile", va.variance_percentile,
                    "within-layer percentile of the partition variance cutoff")
      ->check(CLI::Range(0.0, 100.0));
  vocab->add_option("--out", va.out)->required();

  EntropyArgs ena;
  auto* entropy = app.add_subcommand("intervene-entropy", "fix a neuron over a value grid");
  entropy->add_option("--model", ena.model)->required();
  entropy->add_option("--tokens", ena.tokens)->required();
  entropy->add_option("--neuron", ena.neuron, "neuron id, e.g. L1.5")->required();
  entropy->add_option("--grid", ena.grid, "lo:hi:n or comma-separated values");
  entropy->add_option("--controls", ena.controls)->check(CLI::NonNegativeNumber);
  entropy->add_option("--seed", ena.seed);
  entropy->add_option("--max-windows", ena.max_windows, "0 for all windows");
  entropy->add_option("--exclusions", ena.exclusions);
  entropy->add_option("--out", ena.out)->required();

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate-bos", "BOS scores, value norms and path ablation");
  ablate->add_option("--model", aa.model)->required();
  ablate->add_option("--tokens", aa.tokens)->required();
  ablate->add_option("--neuron", aa.neuron)->required();
  ablate->add_option("--head", aa.head, "head id, e.g. L2.H0")->required();
  ablate->add_option("--samples", aa.samples)->check(CLI::PositiveNumber);
  ablate->add_option("--seed", aa.seed);
  ablate->add_option("--bos", aa.bos, "BOS token id (default: exclusions bos_token_id)");
  ablate->add_option("--baseline-directions", aa.baseline_directions)->check(CLI::NonNegativeNumber);
  ablate->add_option("--max-windows", aa.max_windows, "windows for value norms, 0 for all");
  ablate->add_option("--exclusions", aa.exclusions);
  ablate->add_option("--out", aa.out)->required();

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "plot tables from earlier outputs");
  report->add_option("--in", ra.in)->required()->check(CLI::ExistingDirectory);
  report->add_option("--out", ra.out)->required();

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "write a random model, vocabulary and token stream");
  synth->add_option("--out", sy.out)->required();
  synth->add_option("--seed", sy.seed);
  synth->add_option("--layers", sy.layers)->check(CLI::PositiveNumber);
  synth->add_option("--heads", sy.heads)->check(CLI::PositiveNumber);
  synth->add_option("--d-model", sy.d_model)->check(CLI::PositiveNumber);
  synth->add_option("--d-mlp", sy.d_mlp)->check(CLI::PositiveNumber);
  synth->add_option("--vocab", sy.vocab)->check(CLI::PositiveNumber);
  synth->add_option("--ctx", sy.ctx)->check(CLI::PositiveNumber);
  synth->add_option("--documents", sy.documents)->check(CLI::PositiveNumber);
  synth->add_option("--doc-length", sy.doc_length)->check(CLI::PositiveNumber);
  synth->add_option("--init-std", sy.init_std)->check(CLI::PositiveNumber);

  std::vector<std::string> argv_store = args;
  std::vector<const char*> argv;
  for (const auto& s : argv_store) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolkitVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (correlate->parsed()) run_correlate(ca, ctx);
    else if (universality->parsed()) run_universality(ua, ctx);
    else if (stats->parsed()) run_stats(sa, ctx);
    else if (explain->parsed()) run_explain(ea, ctx);
    else if (make_tests->parsed()) run_make_tests(ma, ctx);
    else if (vocab->parsed()) run_vocab_effects(va, ctx);
    else if (entropy->parsed()) run_entropy(ena, ctx);
    else if (ablate->parsed()) run_ablate(aa, ctx);
    else if (report->parsed()) run_report(ra, ctx);
    else if (synth->parsed()) run_synth(sy, ctx);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace unrn
