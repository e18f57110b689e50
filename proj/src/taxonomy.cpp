#include "unrn/taxonomy.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "unrn/neuron_stats.hpp"

namespace unrn {
namespace {

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
char lower(char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); }

std::string strip_space(const std::string& s) {
  return (!s.empty() && s[0] == ' ') ? s.substr(1) : s;
}

std::string to_lower(std::string s) {
  for (char& c : s) c = lower(c);
  return s;
}

template <typename Pred>
bool all_nonempty(const std::string& s, Pred p) {
  return !s.empty() && std::all_of(s.begin(), s.end(), p);
}

nlohmann::ordered_json spec_to_json(const LabelSpec& s) {
  nlohmann::ordered_json j;
  if (!s.id.empty()) j["id"] = s.id;
  switch (s.kind) {
    case LabelSpec::Kind::token_property:
      j["kind"] = "token_property";
      j["predicate"] = s.predicate;
      if (!s.argument.empty()) j["argument"] = s.argument;
      break;
    case LabelSpec::Kind::unigram:
      j["kind"] = "unigram";
      j["token"] = s.target;
      j["position"] = position_class_name(s.position);
      break;
    case LabelSpec::Kind::previous_token:
      j["kind"] = "previous_token";
      j["inner"] = spec_to_json(*s.inner);
      break;
    case LabelSpec::Kind::external:
      j["kind"] = "external";
      j["path"] = s.path.string();
      break;
  }
  return j;
}

std::string default_id(const LabelSpec& s) {
  switch (s.kind) {
    case LabelSpec::Kind::token_property:
      return s.argument.empty() ? s.predicate : s.predicate + "(" + s.argument + ")";
    case LabelSpec::Kind::unigram:
      return "unigram(" + s.target + ")@" + position_class_name(s.position);
    case LabelSpec::Kind::previous_token:
      return "prev:" + default_id(*s.inner);
    case LabelSpec::Kind::external:
      return "external(" + s.path.filename().string() + ")";
  }
  return {};
}

LabelSpec spec_from_json(const nlohmann::json& j, const std::filesystem::path& base) {
  const auto kind = j.at("kind").get<std::string>();
  LabelSpec s;
  if (kind == "token_property") {
    s = LabelSpec::property(j.at("predicate").get<std::string>(), j.value("argument", std::string()));
  } else if (kind == "unigram") {
    s = LabelSpec::unigram(j.at("token").get<std::string>(),
                           parse_position_class(j.value("position", std::string("any"))));
  } else if (kind == "previous_token") {
    s = LabelSpec::previous(spec_from_json(j.at("inner"), base));
  } else if (kind == "external") {
    std::filesystem::path p = j.at("path").get<std::string>();
    s = LabelSpec::external(p.is_absolute() ? p : base / p);
  } else {
    throw DataError("unknown label kind '" + kind + "'");
  }
  if (j.contains("id")) s.id = j.at("id").get<std::string>();
  return s;
}

}  // namespace

Vocabulary Vocabulary::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Vocabulary v;
  try {
    v.tokens = nlohmann::json::parse(in).at("tokens").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return v;
}

void Vocabulary::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << nlohmann::json{{"tokens", tokens}}.dump(1) << "\n";
}

const std::string& Vocabulary::text(std::uint32_t id) const {
  if (id >= tokens.size()) throw DataError("token id " + std::to_string(id) + " not in vocabulary");
  return tokens[id];
}

std::int64_t Vocabulary::find(const std::string& s) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == s) return static_cast<std::int64_t>(i);
  }
  return -1;
}

const std::vector<std::string>& known_predicates() {
  static const std::vector<std::string> names = {
      "contains_digit", "is_all_caps",    "leading_space",   "is_alpha",
      "is_numeric",     "is_punctuation", "is_newline",      "starts_capital",
      "contains_char",  "starts_with_letter"};
  return names;
}

bool token_predicate(const std::string& predicate, const std::string& argument,
                     const std::string& token) {
  const std::string core = strip_space(token);
  if (predicate == "contains_digit") return std::any_of(token.begin(), token.end(), is_digit);
  if (predicate == "is_all_caps") {
    bool any_letter = false;
    for (char c : core) {
      if (is_letter(c)) {
        any_letter = true;
        if (!std::isupper(static_cast<unsigned char>(c))) return false;
      }
    }
    return any_letter;
  }
  if (predicate == "leading_space") return !token.empty() && token[0] == ' ';
  if (predicate == "is_alpha") return all_nonempty(core, is_letter);
  if (predicate == "is_numeric") return all_nonempty(core, is_digit);
  if (predicate == "is_punctuation") return all_nonempty(core, is_punct);
  if (predicate == "is_newline") return token.find('\n') != std::string::npos;
  if (predicate == "starts_capital") {
    return !core.empty() && std::isupper(static_cast<unsigned char>(core[0]));
  }
  if (predicate == "contains_char") {
    if (argument.size() != 1) throw DataError("contains_char needs a single-character argument");
    return token.find(argument[0]) != std::string::npos;
  }
  if (predicate == "starts_with_letter") {
    if (argument.size() != 1) throw DataError("starts_with_letter needs a single-letter argument");
    return !core.empty() && lower(core[0]) == lower(argument[0]);
  }
  throw DataError("unknown token predicate '" + predicate + "'");
}

std::string position_class_name(PositionClass p) {
  switch (p) {
    case PositionClass::any: return "any";
    case PositionClass::standalone_word: return "standalone_word";
    case PositionClass::word_start: return "word_start";
    case PositionClass::word_middle: return "word_middle";
  }
  return "any";
}

PositionClass parse_position_class(const std::string& s) {
  if (s == "any") return PositionClass::any;
  if (s == "standalone_word") return PositionClass::standalone_word;
  if (s == "word_start") return PositionClass::word_start;
  if (s == "word_middle") return PositionClass::word_middle;
  throw DataError("unknown position class '" + s + "'");
}

LabelSpec LabelSpec::property(std::string predicate, std::string argument) {
  LabelSpec s;
  s.kind = Kind::token_property;
  s.predicate = std::move(predicate);
  s.argument = std::move(argument);
  s.id = default_id(s);
  return s;
}

LabelSpec LabelSpec::unigram(std::string target, PositionClass p) {
  LabelSpec s;
  s.kind = Kind::unigram;
  s.target = std::move(target);
  s.position = p;
  s.id = default_id(s);
  return s;
}

LabelSpec LabelSpec::previous(LabelSpec inner) {
  LabelSpec s;
  s.kind = Kind::previous_token;
  s.inner = std::make_shared<const LabelSpec>(std::move(inner));
  s.id = default_id(s);
  return s;
}

LabelSpec LabelSpec::external(std::filesystem::path path) {
  LabelSpec s;
  s.kind = Kind::external;
  s.path = std::move(path);
  s.id = default_id(s);
  return s;
}

bool starts_word(const TokenStream& s, const Vocabulary& v, std::size_t doc, std::size_t pos) {
  const auto ids = s.document(doc);
  if (pos == 0) return true;
  const auto& cur = v.text(ids[pos]);
  if (cur.empty() || cur[0] == ' ' || !is_letter(cur[0])) return true;
  const auto& prev = v.text(ids[pos - 1]);
  return prev.empty() || !is_letter(prev.back());
}

std::vector<std::uint8_t> generate_labels(const LabelSpec& spec, const TokenStream& s,
                                          const Vocabulary& v) {
  std::vector<std::uint8_t> out(s.tokens.size(), 0);
  switch (spec.kind) {
    case LabelSpec::Kind::token_property: {
      // Evaluate once per vocabulary item.
      std::vector<std::uint8_t> table(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        table[i] = token_predicate(spec.predicate, spec.argument, v.tokens[i]) ? 1 : 0;
      }
      for (std::size_t i = 0; i < s.tokens.size(); ++i) {
        if (s.tokens[i] >= table.size()) throw DataError("token id outside vocabulary");
        out[i] = table[s.tokens[i]];
      }
      break;
    }
    case LabelSpec::Kind::unigram: {
      const std::string target = to_lower(strip_space(spec.target));
      std::vector<std::uint8_t> match(v.size());
      bool any = false;
      for (std::size_t i = 0; i < v.size(); ++i) {
        match[i] = to_lower(strip_space(v.tokens[i])) == target ? 1 : 0;
        any = any || match[i];
      }
      if (!any) throw DataError("unigram '" + spec.target + "' is not in the vocabulary");
      for (std::size_t d = 0; d < s.num_documents(); ++d) {
        const auto ids = s.document(d);
        const std::size_t base = s.doc_offsets[d];
        for (std::size_t p = 0; p < ids.size(); ++p) {
          if (!match.at(ids[p])) continue;
          const bool start = starts_word(s, v, d, p);
          const bool next_continues = p + 1 < ids.size() && !starts_word(s, v, d, p + 1);
          bool hit = false;
          switch (spec.position) {
            case PositionClass::any: hit = true; break;
            case PositionClass::standalone_word: hit = start && !next_continues; break;
            case PositionClass::word_start: hit = start && next_continues; break;
            case PositionClass::word_middle: hit = !start; break;
          }
          out[base + p] = hit ? 1 : 0;
        }
      }
      break;
    }
    case LabelSpec::Kind::previous_token: {
      const auto inner = generate_labels(*spec.inner, s, v);
      for (std::size_t d = 0; d < s.num_documents(); ++d) {
        const std::size_t b = s.doc_offsets[d], e = s.doc_offsets[d + 1];
        for (std::size_t i = b + 1; i < e; ++i) out[i] = inner[i - 1];
      }
      break;
    }
    case LabelSpec::Kind::external: {
      out = read_labels(spec.path);
      if (out.size() != s.tokens.size()) {
        throw DataError("external label file " + spec.path.string() + " has " +
                        std::to_string(out.size()) + " labels for " +
                        std::to_string(s.tokens.size()) + " tokens");
      }
      break;
    }
  }
  return out;
}

std::vector<LabelSpec> read_test_suite(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<LabelSpec> specs;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& t : j.at("tests")) specs.push_back(spec_from_json(t, path.parent_path()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return specs;
}

void write_test_suite(std::span<const LabelSpec> specs, const std::filesystem::path& path) {
  nlohmann::ordered_json j;
  j["tests"] = nlohmann::json::array();
  for (const auto& s : specs) j["tests"].push_back(spec_to_json(s));
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(1) << "\n";
}

std::vector<LabelSpec> default_test_suite(const Vocabulary& v, const TokenStream& s,
                                          int top_k_unigrams) {
  std::vector<LabelSpec> suite;
  auto in_vocab = [&](const std::string& target) {
    const auto t = to_lower(target);
    return std::any_of(v.tokens.begin(), v.tokens.end(),
                       [&](const std::string& x) { return to_lower(strip_space(x)) == t; });
  };
  for (char c = 'a'; c <= 'z'; ++c) {
    const std::string letter(1, c);
    if (!in_vocab(letter)) continue;
    for (auto p : {PositionClass::standalone_word, PositionClass::word_start,
                   PositionClass::word_middle}) {
      suite.push_back(LabelSpec::unigram(letter, p));
    }
  }
  std::vector<LabelSpec> properties;
  for (const char* p : {"contains_digit", "is_all_caps", "leading_space", "is_alpha", "is_numeric",
                        "is_punctuation", "is_newline", "starts_capital"}) {
    properties.push_back(LabelSpec::property(p));
  }
  for (char c = 'a'; c <= 'z'; ++c) {
    properties.push_back(LabelSpec::property("starts_with_letter", std::string(1, c)));
  }
  for (char c : std::string(",.()\"':;-!?")) {
    properties.push_back(LabelSpec::property("contains_char", std::string(1, c)));
  }

  // Most frequent alphabetic unigrams; ties broken by token text.
  std::map<std::string, std::uint64_t> freq;
  for (auto id : s.tokens) {
    if (id >= v.size()) continue;
    const auto core = to_lower(strip_space(v.tokens[id]));
    if (core.size() >= 2 && all_nonempty(core, is_letter)) ++freq[core];
  }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<LabelSpec> unigrams;
  for (int k = 0; k < top_k_unigrams && k < static_cast<int>(ranked.size()); ++k) {
    unigrams.push_back(LabelSpec::unigram(ranked[k].first, PositionClass::any));
  }

  suite.insert(suite.end(), properties.begin(), properties.end());
  suite.insert(suite.end(), unigrams.begin(), unigrams.end());
  for (const auto& p : properties) suite.push_back(LabelSpec::previous(p));
  for (const auto& u : unigrams) suite.push_back(LabelSpec::previous(u));
  return suite;
}

VarianceStats variance_stats(std::span<const double> xs) {
  VarianceStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  for (double x : xs) s.m2 += (x - s.mean) * (x - s.mean);
  return s;
}

namespace {

RivResult riv_score(const VarianceStats& total, const VarianceStats& neg, const VarianceStats& pos) {
  RivResult r;
  r.n_negative = neg.n;
  r.n_positive = pos.n;
  if (total.n == 0) return r;
  r.beta = static_cast<double>(pos.n) / static_cast<double>(total.n);
  r.var_total = total.variance();
  r.degenerate = neg.n < 2 || pos.n < 2;
  r.var_negative = neg.n < 2 ? 0.0 : neg.variance();
  r.var_positive = pos.n < 2 ? 0.0 : pos.variance();
  if (!(r.var_total > 0.0)) {
    r.var_total = 0.0;
    return r;
  }
  r.score = 1.0 - ((1.0 - r.beta) * r.var_negative + r.beta * r.var_positive) / r.var_total;
  return r;
}

}  // namespace

RivResult reduction_in_variance(std::span<const float> activations,
                                std::span<const std::uint8_t> labels,
                                std::span<const std::uint8_t> mask) {
  if (labels.size() != activations.size()) throw DataError("label length does not match activations");
  if (!mask.empty() && mask.size() != activations.size()) {
    throw DataError("mask length does not match activations");
  }
  std::vector<double> all, neg, pos;
  for (std::size_t i = 0; i < activations.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    all.push_back(activations[i]);
    (labels[i] ? pos : neg).push_back(activations[i]);
  }
  return riv_score(variance_stats(all), variance_stats(neg), variance_stats(pos));
}

RivResult riv_from_partition(const VarianceStats& total, const VarianceStats& positive) {
  if (positive.n > total.n) throw DataError("positive class larger than total");
  VarianceStats neg;
  if (positive.n == 0) {
    neg = total;
  } else if (positive.n < total.n) {
    const double n = static_cast<double>(total.n), n1 = static_cast<double>(positive.n);
    const double n0 = n - n1;
    neg.n = total.n - positive.n;
    neg.mean = (n * total.mean - n1 * positive.mean) / n0;
    const double delta = positive.mean - neg.mean;
    neg.m2 = std::max(0.0, total.m2 - positive.m2 - delta * delta * n0 * n1 / n);
  }
  return riv_score(total, neg, positive);
}

PositionMiResult position_mutual_information(const Matrix& acts, const PositionMiOptions& opts) {
  const std::size_t W = acts.rows, T = acts.cols;
  const std::size_t A = static_cast<std::size_t>(opts.activation_bins);
  const std::size_t P = static_cast<std::size_t>(opts.position_bins);
  if (A < 2 || P < 1) throw DataError("need at least 2 activation bins and 1 position bin");
  if (W < A) {
    throw DataError("position MI needs at least as many windows (" + std::to_string(W) +
                    ") as activation bins (" + std::to_string(A) + ")");
  }
  if (T < P) throw DataError("context shorter than the number of position bins");

  std::vector<float> sorted(acts.data);
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  std::vector<float> edges;
  for (std::size_t k = 1; k < A; ++k) edges.push_back(sorted[k * n / A]);

  MatrixD joint(A, P, 0.0);
  for (std::size_t w = 0; w < W; ++w) {
    for (std::size_t t = 0; t < T; ++t) {
      const float v = acts(w, t);
      const std::size_t a = std::upper_bound(edges.begin(), edges.end(), v) - edges.begin();
      joint(a, t * P / T) += 1.0;
    }
  }
  std::vector<double> pa(A, 0.0), pp(P, 0.0);
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t p = 0; p < P; ++p) {
      joint(a, p) /= static_cast<double>(n);
      pa[a] += joint(a, p);
      pp[p] += joint(a, p);
    }
  }
  PositionMiResult r;
  double mi = 0.0;
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t p = 0; p < P; ++p) {
      const double j = joint(a, p);
      if (j > 0.0) mi += j * std::log(j / (pa[a] * pp[p]));
    }
  }
  r.mi = std::max(0.0, mi);
  r.mean_by_position.resize(T);
  r.std_by_position.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> col(W);
    for (std::size_t w = 0; w < W; ++w) col[w] = acts(w, t);
    const auto s = variance_stats(col);
    r.mean_by_position[t] = s.mean;
    r.std_by_position[t] = std::sqrt(s.variance());
  }
  return r;
}

std::string vocab_class_name(VocabClass c) {
  switch (c) {
    case VocabClass::prediction: return "prediction";
    case VocabClass::suppression: return "suppression";
    case VocabClass::partition: return "partition";
    case VocabClass::none: return "none";
  }
  return "none";
}

VocabEffectClass classify_vocab_effect(std::span<const double> effect,
                                       const VocabEffectThresholds& thresholds) {
  VocabEffectClass out;
  out.thresholds = thresholds;
  const auto m = vector_moments(effect);
  out.variance = m.variance;
  out.skew = m.skew;
  out.kurtosis = m.kurtosis;
  if (!is_defined(m.kurtosis)) return out;
  if (m.kurtosis > thresholds.kurtosis) {
    if (m.skew > 0.0) out.cls = VocabClass::prediction;
    else if (m.skew < 0.0) out.cls = VocabClass::suppression;
  } else if (m.variance > thresholds.variance_cutoff) {
    out.cls = VocabClass::partition;
  }
  return out;
}

std::vector<NeighborResult> nearest_weight_neighbor(const ModelWeights& w, WeightBasis basis,
                                                    int workers) {
  const auto& c = w.config;
  const std::size_t N = static_cast<std::size_t>(c.n_neurons()), d = c.d_model;
  // Unit vectors, one row per neuron.
  MatrixD unit(N, d, 0.0);
  std::vector<bool> valid(N, false);
  for (std::size_t g = 0; g < N; ++g) {
    const int l = static_cast<int>(g) / c.d_mlp, j = static_cast<int>(g) % c.d_mlp;
    const auto vec = basis == WeightBasis::input ? w.w_in(l, j) : w.w_out(l, j);
    double norm = 0.0;
    for (float x : vec) norm += double{x} * x;
    if (norm == 0.0) continue;
    norm = std::sqrt(norm);
    valid[g] = true;
    for (std::size_t i = 0; i < d; ++i) unit(g, i) = vec[i] / norm;
  }
  std::vector<NeighborResult> out(N);
  parallel_for(N, workers, [&](std::size_t g) {
    if (!valid[g]) return;
    auto& r = out[g];
    const auto a = unit.row(g);
    for (std::size_t h = 0; h < N; ++h) {
      if (h == g || !valid[h]) continue;
      const auto b = unit.row(h);
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += a[i] * b[i];
      dot = std::clamp(dot, -1.0, 1.0);
      if (r.argmax < 0 || dot > r.max_cos) {
        r.max_cos = dot;
        r.argmax = static_cast<std::int64_t>(h);
      }
      if (r.argmin < 0 || dot < r.min_cos) {
        r.min_cos = dot;
        r.argmin = static_cast<std::int64_t>(h);
      }
    }
  });
  return out;
}

}  // namespace unrn
