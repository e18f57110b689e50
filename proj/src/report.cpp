#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>

#include "cli_util.hpp"
#include "unrn/cli.hpp"

namespace fs = std::filesystem;

namespace unrn {
namespace {

using cli::CsvTable;
using cli::CsvWriter;

// First file with this name under root, in sorted path order.
std::optional<fs::path> find_file(const fs::path& root, const std::string& name) {
  std::vector<fs::path> hits;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().filename() == name) hits.push_back(e.path());
  }
  if (hits.empty()) return std::nullopt;
  std::sort(hits.begin(), hits.end());
  return hits.front();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0, n = 0.0;
  for (double x : v) {
    if (std::isnan(x)) continue;
    s += x;
    n += 1.0;
  }
  return n > 0 ? s / n : kUndefined;
}

std::map<std::string, bool> universal_flags(const std::optional<CsvTable>& u) {
  std::map<std::string, bool> flags;
  if (!u) return flags;
  for (std::size_t i = 0; i < u->rows.size(); ++i) {
    flags[u->text(i, "neuron")] = u->text(i, "is_universal") == "1";
  }
  return flags;
}

// Excess correlation per layer and its histogram; copy of the depth matrix.
void universality_tables(const CsvTable& u, const fs::path& in_dir, const fs::path& out,
                         std::vector<std::string>& written) {
  std::map<int, std::vector<std::size_t>> by_layer;
  for (std::size_t i = 0; i < u.rows.size(); ++i) {
    by_layer[static_cast<int>(u.number(i, "layer"))].push_back(i);
  }
  {
    CsvWriter csv(out / "excess_by_layer.csv", {"layer", "neurons", "universal", "fraction_universal",
                                                "mean_excess", "mean_max", "mean_baseline"});
    for (const auto& [layer, rows] : by_layer) {
      std::vector<double> ex, mx, bs;
      double n_univ = 0.0;
      for (auto i : rows) {
        ex.push_back(u.number(i, "excess"));
        mx.push_back(u.number(i, "mean_max"));
        bs.push_back(u.number(i, "mean_baseline"));
        if (u.text(i, "is_universal") == "1") n_univ += 1.0;
      }
      csv.row(layer, rows.size(), n_univ, n_univ / static_cast<double>(rows.size()), mean_of(ex),
              mean_of(mx), mean_of(bs));
    }
    written.push_back("excess_by_layer.csv");
  }
  {
    // 40 bins over [-1, 1].
    std::vector<std::uint64_t> hist(40, 0);
    for (std::size_t i = 0; i < u.rows.size(); ++i) {
      const double e = u.number(i, "excess");
      if (std::isnan(e)) continue;
      const int b = std::clamp(static_cast<int>(std::floor((e + 1.0) / 0.05)), 0, 39);
      ++hist[b];
    }
    CsvWriter csv(out / "excess_histogram.csv", {"bin_lo", "bin_hi", "count"});
    for (int b = 0; b < 40; ++b) csv.row(-1.0 + 0.05 * b, -1.0 + 0.05 * (b + 1), hist[b]);
    written.push_back("excess_histogram.csv");
  }
  {
    CsvWriter csv(out / "max_correlation_range.csv",
                  {"neuron", "layer", "mean_max", "max_max", "min_max", "mean_baseline"});
    for (std::size_t i = 0; i < u.rows.size(); ++i) {
      csv.row(u.text(i, "neuron"), u.text(i, "layer"), u.number(i, "mean_max"),
              u.number(i, "max_max"), u.number(i, "min_max"), u.number(i, "mean_baseline"));
    }
    written.push_back("max_correlation_range.csv");
  }
  if (auto depth = find_file(in_dir, "depth_specialization.csv")) {
    fs::copy_file(*depth, out / "depth_specialization.csv", fs::copy_options::overwrite_existing);
    written.push_back("depth_specialization.csv");
  }
}

// Mean within-layer percentile of each metric for universal and other neurons,
// plus the sparsity / input-output cosine scatter.
void stats_tables(const CsvTable& s, const std::map<std::string, bool>& flags, const fs::path& out,
                  std::vector<std::string>& written) {
  std::vector<std::string> metrics;
  for (const auto& h : s.header) {
    if (h.rfind("pct_", 0) == 0) metrics.push_back(h.substr(4));
  }
  auto is_univ = [&](std::size_t i) {
    auto it = flags.find(s.text(i, "neuron"));
    if (it != flags.end()) return it->second;
    return s.column("is_universal") >= 0 && s.text(i, "is_universal") == "1";
  };
  {
    CsvWriter csv(out / "universal_percentiles.csv", {"metric", "layer", "group", "neurons",
                                                      "mean_percentile", "mean_value"});
    std::set<int> layers;
    for (std::size_t i = 0; i < s.rows.size(); ++i) layers.insert(static_cast<int>(s.number(i, "layer")));
    for (const auto& metric : metrics) {
      for (int layer : layers) {
        for (const char* group : {"universal", "other"}) {
          std::vector<double> pct, val;
          for (std::size_t i = 0; i < s.rows.size(); ++i) {
            if (static_cast<int>(s.number(i, "layer")) != layer) continue;
            if (is_univ(i) != (std::string(group) == "universal")) continue;
            pct.push_back(s.number(i, "pct_" + metric));
            val.push_back(s.number(i, metric));
          }
          if (pct.empty()) continue;
          csv.row(metric, layer, group, pct.size(), mean_of(pct), mean_of(val));
        }
      }
    }
    written.push_back("universal_percentiles.csv");
  }
  {
    CsvWriter csv(out / "sparsity_vs_cosine.csv",
                  {"neuron", "layer", "sparsity", "cos_in_out", "is_universal"});
    for (std::size_t i = 0; i < s.rows.size(); ++i) {
      csv.row(s.text(i, "neuron"), s.text(i, "layer"), s.number(i, "sparsity"),
              s.number(i, "cos_in_out"), is_univ(i));
    }
    written.push_back("sparsity_vs_cosine.csv");
  }
}

void vocab_tables(const CsvTable& v, const std::map<std::string, bool>& flags, const fs::path& out,
                  std::vector<std::string>& written) {
  std::map<std::pair<int, std::string>, std::uint64_t> counts;
  std::set<int> layers;
  for (std::size_t i = 0; i < v.rows.size(); ++i) {
    const int l = static_cast<int>(v.number(i, "layer"));
    layers.insert(l);
    ++counts[{l, v.text(i, "class")}];
  }
  {
    CsvWriter csv(out / "vocab_classes_by_layer.csv", {"layer", "class", "count"});
    for (int l : layers) {
      for (const char* c : {"prediction", "suppression", "partition", "none"}) {
        auto it = counts.find({l, c});
        csv.row(l, c, it == counts.end() ? std::uint64_t{0} : it->second);
      }
    }
    written.push_back("vocab_classes_by_layer.csv");
  }
  {
    CsvWriter csv(out / "vocab_moments.csv",
                  {"neuron", "layer", "class", "variance", "skew", "kurtosis", "is_universal"});
    for (std::size_t i = 0; i < v.rows.size(); ++i) {
      auto it = flags.find(v.text(i, "neuron"));
      csv.row(v.text(i, "neuron"), v.text(i, "layer"), v.text(i, "class"), v.number(i, "variance"),
              v.number(i, "skew"), v.number(i, "kurtosis"), it != flags.end() && it->second);
    }
    written.push_back("vocab_moments.csv");
  }
}

void entropy_table(const CsvTable& e, const fs::path& out, std::vector<std::string>& written) {
  // Per grid value: the target curve and the control mean.
  std::map<double, std::vector<double>> scale_ctl, ent_ctl;
  std::map<double, std::pair<double, double>> target;
  for (std::size_t i = 0; i < e.rows.size(); ++i) {
    if (e.text(i, "setting") != "fixed") continue;
    const double v = e.number(i, "value");
    if (e.text(i, "role") == "target") {
      target[v] = {e.number(i, "ln_scale"), e.number(i, "entropy")};
    } else {
      scale_ctl[v].push_back(e.number(i, "ln_scale"));
      ent_ctl[v].push_back(e.number(i, "entropy"));
    }
  }
  CsvWriter csv(out / "entropy_sweep.csv", {"value", "target_ln_scale", "target_entropy",
                                            "control_ln_scale", "control_entropy"});
  for (const auto& [v, t] : target) {
    csv.row(v, t.first, t.second, scale_ctl.count(v) ? mean_of(scale_ctl[v]) : kUndefined,
            ent_ctl.count(v) ? mean_of(ent_ctl[v]) : kUndefined);
  }
  written.push_back("entropy_sweep.csv");
}

void ablation_tables(const fs::path& in, const fs::path& out, std::vector<std::string>& written) {
  if (auto p = find_file(in, "path_ablation.csv")) {
    const auto t = cli::read_csv(*p);
    CsvWriter csv(out / "path_ablation_deltas.csv",
                  {"activation", "delta_bos_attention", "delta_od_norm"});
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      csv.row(t.number(i, "activation"), t.number(i, "delta_bos_attention"),
              t.number(i, "delta_od_norm"));
    }
    written.push_back("path_ablation_deltas.csv");
  }
  if (auto p = find_file(in, "bos_scores.csv")) {
    fs::copy_file(*p, out / "bos_scores.csv", fs::copy_options::overwrite_existing);
    written.push_back("bos_scores.csv");
  }
  if (auto p = find_file(in, "value_norms.csv")) {
    fs::copy_file(*p, out / "value_norms.csv", fs::copy_options::overwrite_existing);
    written.push_back("value_norms.csv");
  }
}

void neighbor_table(const CsvTable& n, const std::map<std::string, bool>& flags,
                    const fs::path& out, std::vector<std::string>& written) {
  CsvWriter csv(out / "weight_neighbors.csv",
                {"neuron", "layer", "in_max_cos", "out_max_cos", "out_min_cos", "is_universal"});
  for (std::size_t i = 0; i < n.rows.size(); ++i) {
    auto it = flags.find(n.text(i, "neuron"));
    csv.row(n.text(i, "neuron"), n.text(i, "layer"), n.number(i, "in_max_cos"),
            n.number(i, "out_max_cos"), n.number(i, "out_min_cos"), it != flags.end() && it->second);
  }
  written.push_back("weight_neighbors.csv");
}

}  // namespace

std::vector<std::string> write_report(const fs::path& in, const fs::path& out) {
  if (!fs::is_directory(in)) throw DataError(in.string() + " is not a directory");
  fs::create_directories(out);
  std::vector<std::string> written;
  auto load = [&](const std::string& name) -> std::optional<CsvTable> {
    if (auto p = find_file(in, name)) return cli::read_csv(*p);
    return std::nullopt;
  };
  const auto univ = load("universality.csv");
  const auto flags = universal_flags(univ);
  if (univ) universality_tables(*univ, in, out, written);
  if (const auto s = load("stats.csv")) stats_tables(*s, flags, out, written);
  if (const auto v = load("vocab_effects.csv")) vocab_tables(*v, flags, out, written);
  if (const auto e = load("entropy.csv")) entropy_table(*e, out, written);
  ablation_tables(in, out, written);
  if (const auto n = load("neighbors.csv")) neighbor_table(*n, flags, out, written);
  if (const auto b = load("best_explanations.csv")) {
    CsvWriter csv(out / "best_explanations.csv", {"neuron", "layer", "test", "riv"});
    for (std::size_t i = 0; i < b->rows.size(); ++i) {
      csv.row(b->text(i, "neuron"), b->text(i, "layer"), b->text(i, "test"), b->number(i, "riv"));
    }
    written.push_back("best_explanations.csv");
  }
  if (written.empty()) throw DataError("no recognised outputs under " + in.string());
  return written;
}

}  // namespace unrn
