#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fixtures.hpp"
#include "unrn/cli.hpp"

using namespace unrn;
using fixtures::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "unrn");
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Rows of a CSV split on commas (no quoted fields in the columns used here).
std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

std::size_t col(const std::vector<std::vector<std::string>>& rows, const std::string& name) {
  const auto& h = rows.at(0);
  const auto it = std::find(h.begin(), h.end(), name);
  REQUIRE(it != h.end());
  return static_cast<std::size_t>(it - h.begin());
}

void synth(const fs::path& dir, int docs = 12, int seed = 1) {
  const auto r = cli({"synth", "--out", dir.string(), "--seed", std::to_string(seed), "--layers", "2",
                      "--heads", "2", "--d-model", "16", "--d-mlp", "8", "--vocab", "64", "--ctx", "16",
                      "--documents", std::to_string(docs), "--doc-length", "40"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
}

// Writes a correlate output directory by hand: corr and baseline tensors plus
// the layout metadata that universality reads.
void write_corr_dir(const fs::path& dir, const MatrixD& corr, const MatrixD& base, int n_layer,
                    int d_mlp) {
  fs::create_directories(dir);
  auto to_t = [](const MatrixD& m) {
    return Tensor({m.rows, m.cols}, std::vector<float>(m.data.begin(), m.data.end()));
  };
  write_tensor(to_t(corr), dir / "corr.tensor");
  write_tensor(to_t(base), dir / "baseline.tensor");
  nlohmann::json j;
  j["layout_a"] = {{"n_layer", n_layer}, {"d_mlp", d_mlp}};
  j["layout_b"] = {{"n_layer", n_layer}, {"d_mlp", d_mlp}};
  std::ofstream(dir / "correlation.json") << j.dump();
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  CHECK(cli({"correlate", "--model-a", "x"}).code == 1);
  CHECK(cli({"synth", "--out", "x", "--layers", "0"}).code == 1);
  const auto v = cli({"--version"});
  CHECK(v.code == 0);
  CHECK_FALSE(v.out.empty());
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("data errors exit with 2") {
  TempDir dir;
  const auto r = cli({"stats", "--model", (dir / "missing").string(), "--tokens",
                      (dir / "t.bin").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("data error") != std::string::npos);

  synth(dir / "m");
  write_file_bytes(std::vector<std::uint8_t>{'U', 'N', 'T', 'K', 1, 0}, dir / "bad.bin");
  CHECK(cli({"stats", "--model", (dir / "m").string(), "--tokens", (dir / "bad.bin").string(),
             "--out", (dir / "o").string()})
            .code == 2);
  CHECK(cli({"intervene-entropy", "--model", (dir / "m").string(), "--tokens",
             (dir / "m/tokens.bin").string(), "--neuron", "L9.0", "--out", (dir / "e").string()})
            .code == 2);
}

TEST_CASE("numeric errors exit with 3") {
  TempDir dir;
  synth(dir / "m");
  auto w = load_model(dir / "m");
  w.W_E(5, 3) = std::numeric_limits<float>::quiet_NaN();
  save_model(w, dir / "nan");
  const auto r = cli({"correlate", "--model-a", (dir / "nan").string(), "--model-b",
                      (dir / "m").string(), "--tokens", (dir / "m/tokens.bin").string(),
                      "--exclusions", (dir / "m/exclusions.json").string(), "--out",
                      (dir / "c").string()});
  CHECK(r.code == 3);
}

TEST_CASE("duplicated model correlates with itself") {
  TempDir dir;
  synth(dir / "m");
  const auto m = (dir / "m").string();
  const auto r = cli({"correlate", "--model-a", m, "--model-b", m, "--tokens", m + "/tokens.bin",
                      "--out", (dir / "c").string(), "--tile-size", "5"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  for (const char* f : {"corr.tensor", "baseline.tensor", "summary.csv", "correlation.json",
                        "manifest.json"}) {
    CHECK(fs::exists(dir / "c" / f));
  }
  const auto manifest = nlohmann::json::parse(slurp(dir / "c/manifest.json"));
  CHECK(manifest.at("status") == "complete");
  CHECK(manifest.at("command") == "correlate");
  // 12 documents x 40 tokens minus one BOS each.
  CHECK(manifest.at("token_counts").at("masked_in") == 12 * 39);

  const auto u = cli({"universality", "--corr", (dir / "c").string(), "--out", (dir / "u").string()});
  REQUIRE_MESSAGE(u.code == 0, u.err);
  const auto rows = csv_rows(dir / "u/universality.csv");
  REQUIRE(rows.size() == 17);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(std::abs(std::stod(rows[i][col(rows, "mean_max")]) - 1.0) < 1e-6);
    CHECK(rows[i][col(rows, "argmax_0")] == rows[i][0]);
  }
  const auto depth = csv_rows(dir / "u/depth_specialization.csv");
  REQUIRE(depth.size() == 3);
  CHECK(depth[1][1] == "1");
  CHECK(depth[1][2] == "0");
  CHECK(depth[2][1] == "0");
  CHECK(depth[2][2] == "1");
}

TEST_CASE("universality flags exactly the planted neurons") {
  TempDir dir;
  // 2 layers x 4 neurons, three comparison runs. Noise correlations sit at
  // 0.2 with baselines at 0.15; neurons L0.1, L1.0 and L1.3 get a 0.9 match.
  std::vector<std::string> dirs;
  for (int k = 0; k < 3; ++k) {
    MatrixD corr(8, 8, 0.2), base(8, 8, 0.15);
    for (int n : {1, 4, 7}) corr(n, (n + k) % 8) = 0.9;
    corr(2, 5) = 0.6;  // one strong but sub-threshold neuron
    const auto d = dir / ("c" + std::to_string(k));
    write_corr_dir(d, corr, base, 2, 4);
    dirs.push_back(d.string());
  }
  std::vector<std::string> args = {"universality", "--threshold", "0.5", "--out", (dir / "u").string(),
                                   "--corr"};
  args.insert(args.end(), dirs.begin(), dirs.end());
  const auto r = cli(args);
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto rows = csv_rows(dir / "u/universality.csv");
  std::vector<std::string> flagged;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i][col(rows, "is_universal")] == "1") flagged.push_back(rows[i][0]);
  }
  CHECK(flagged == std::vector<std::string>{"L0.1", "L1.0", "L1.3"});
  CHECK(rows[2][col(rows, "argmax_2")] == "L0.3");
  CHECK(std::stod(rows[2][col(rows, "excess")]) == doctest::Approx(0.75));

  write_corr_dir(dir / "bad", MatrixD(4, 8, 0.1), MatrixD(4, 8, 0.1), 2, 4);
  CHECK(cli({"universality", "--corr", (dir / "bad").string(), "--out", (dir / "u2").string()}).code == 2);
}

TEST_CASE("full pipeline on a synthetic model") {
  TempDir dir;
  synth(dir / "m", 40);
  const auto m = (dir / "m").string();
  const auto toks = m + "/tokens.bin";
  auto ok = [](const Run& r) {
    CHECK_MESSAGE(r.code == 0, r.err);
    return r.code == 0;
  };
  REQUIRE(ok(cli({"correlate", "--model-a", m, "--model-b", m, "--tokens", toks, "--out",
                  (dir / "out/c").string()})));
  REQUIRE(ok(cli({"universality", "--corr", (dir / "out/c").string(), "--out",
                  (dir / "out/u").string()})));
  REQUIRE(ok(cli({"stats", "--model", m, "--tokens", toks, "--universality",
                  (dir / "out/u/universality.csv").string(), "--out", (dir / "out/s").string()})));
  REQUIRE(ok(cli({"make-tests", "--vocab", m + "/vocab.json", "--tokens", toks, "--top-k", "5",
                  "--out", (dir / "t").string()})));
  REQUIRE(ok(cli({"explain", "--model", m, "--tokens", toks, "--tests", (dir / "t/tests.json").string(),
                  "--activation-bins", "4", "--position-bins", "8", "--out", (dir / "out/x").string()})));
  REQUIRE(ok(cli({"vocab-effects", "--model", m, "--out", (dir / "out/v").string()})));
  REQUIRE(ok(cli({"intervene-entropy", "--model", m, "--tokens", toks, "--neuron", "L1.2", "--grid",
                  "0:4:3", "--controls", "3", "--max-windows", "8", "--out", (dir / "out/e").string()})));
  REQUIRE(ok(cli({"ablate-bos", "--model", m, "--tokens", toks, "--neuron", "L0.1", "--head", "L1.H0",
                  "--samples", "20", "--baseline-directions", "30", "--out", (dir / "out/a").string()})));
  REQUIRE(ok(cli({"report", "--in", (dir / "out").string(), "--out", (dir / "r").string()})));

  const auto stats = csv_rows(dir / "out/s/stats.csv");
  CHECK(stats.size() == 17);
  CHECK(col(stats, "pct_kurtosis") > 0);
  CHECK(col(stats, "is_universal") > 0);

  const auto suite = nlohmann::json::parse(slurp(dir / "t/tests.json"));
  const auto expl = csv_rows(dir / "out/x/explanations.csv");
  CHECK(expl.size() == 1 + 16 * suite.at("tests").size());
  const auto meta = nlohmann::json::parse(slurp(dir / "out/x/explain.json"));
  CHECK(meta.at("mi_computed") == true);
  CHECK(csv_rows(dir / "out/x/position_profile.csv").size() == 1 + 16 * 16);

  const auto ent = csv_rows(dir / "out/e/entropy.csv");
  CHECK(ent.size() == 1 + 4 * 4);  // target and 3 controls, clean row plus 3 grid values
  const auto ab = nlohmann::json::parse(slurp(dir / "out/a/ablate_bos.json"));
  CHECK(ab.at("samples") == 20);
  CHECK(csv_rows(dir / "out/a/value_norms.csv").size() == 5);

  for (const char* f : {"excess_by_layer.csv", "excess_histogram.csv", "max_correlation_range.csv",
                        "depth_specialization.csv", "universal_percentiles.csv",
                        "sparsity_vs_cosine.csv", "vocab_classes_by_layer.csv", "vocab_moments.csv",
                        "entropy_sweep.csv", "path_ablation_deltas.csv", "bos_scores.csv",
                        "value_norms.csv", "weight_neighbors.csv", "best_explanations.csv"}) {
    CHECK_MESSAGE(fs::exists(dir / "r" / f), f);
  }
  const auto classes = csv_rows(dir / "r/vocab_classes_by_layer.csv");
  CHECK(classes.size() == 1 + 2 * 4);

  fs::create_directories(dir / "empty");
  CHECK(cli({"report", "--in", (dir / "empty").string(), "--out", (dir / "r2").string()}).code == 2);
}

TEST_CASE("path ablation through the command line") {
  TempDir dir;
  save_model(fixtures::path_toy_model(3), dir / "toy");
  write_token_stream(fixtures::random_stream(8, 64, 64, 16, 4), dir / "toy/tokens.bin");
  const auto r = cli({"ablate-bos", "--model", (dir / "toy").string(), "--tokens",
                      (dir / "toy/tokens.bin").string(), "--neuron", "L0.0", "--head", "L1.H0",
                      "--bos", "0", "--samples", "50", "--out", (dir / "a").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto j = nlohmann::json::parse(slurp(dir / "a/ablate_bos.json"));
  CHECK(j.at("fraction_bos_attention_decrease") == 1.0);
  CHECK(j.at("fraction_od_norm_increase") == 1.0);
  CHECK(j.at("heuristic_score").get<double>() > 0.0);
  // Without --bos or an exclusions file there is no BOS id.
  CHECK(cli({"ablate-bos", "--model", (dir / "toy").string(), "--tokens",
             (dir / "toy/tokens.bin").string(), "--neuron", "L0.0", "--head", "L1.H0", "--out",
             (dir / "b").string()})
            .code == 2);
}

TEST_CASE("reruns produce identical CSVs") {
  TempDir dir;
  synth(dir / "m", 20);
  const auto m = (dir / "m").string();
  const auto toks = m + "/tokens.bin";
  REQUIRE(cli({"make-tests", "--vocab", m + "/vocab.json", "--tokens", toks, "--out",
               (dir / "t").string()}).code == 0);
  auto run_all = [&](const std::string& tag, const std::string& workers) {
    const auto o = (dir / tag).string();
    std::vector<std::vector<std::string>> cmds = {
        {"correlate", "--model-a", m, "--model-b", m, "--tokens", toks, "--baseline-seed", "7",
         "--out", o + "/c"},
        {"stats", "--model", m, "--tokens", toks, "--out", o + "/s"},
        {"explain", "--model", m, "--tokens", toks, "--tests", (dir / "t/tests.json").string(),
         "--activation-bins", "4", "--position-bins", "4", "--out", o + "/x"},
        {"vocab-effects", "--model", m, "--out", o + "/v"},
        {"intervene-entropy", "--model", m, "--tokens", toks, "--neuron", "L1.1", "--grid",
         "-1:3:3", "--controls", "4", "--seed", "11", "--out", o + "/e"},
        {"ablate-bos", "--model", m, "--tokens", toks, "--neuron", "L0.0", "--head", "L1.H1",
         "--samples", "30", "--seed", "5", "--out", o + "/a"}};
    for (auto c : cmds) {
      c.insert(c.end(), {"--workers", workers});
      const auto r = cli(c);
      REQUIRE_MESSAGE(r.code == 0, (c.front() + ": " + r.err));
    }
  };
  run_all("r1", "2");
  run_all("r2", "2");
  run_all("r3", "1");
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "r1")) {
    if (e.path().extension() != ".csv" && e.path().extension() != ".tensor") continue;
    const auto rel = fs::relative(e.path(), dir / "r1");
    CHECK_MESSAGE(slurp(e.path()) == slurp(dir / "r2" / rel), rel.string());
    CHECK_MESSAGE(slurp(e.path()) == slurp(dir / "r3" / rel), rel.string());
    ++compared;
  }
  CHECK(compared >= 12);
}
