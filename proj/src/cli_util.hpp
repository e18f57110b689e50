#pragma once

// CSV and manifest helpers shared by the subcommands.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "unrn/common.hpp"

namespace unrn::cli {

inline std::string cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}
inline std::string cell(const char* s) { return cell(std::string(s)); }
inline std::string cell(bool b) { return b ? "1" : "0"; }
template <typename T>
  requires std::is_arithmetic_v<T>
std::string cell(T v) {
  if constexpr (std::is_floating_point_v<T>) {
    return format_number(static_cast<double>(v));
  } else {
    return std::to_string(v);
  }
}

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
      : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot write " + path.string());
    write_cells(header);
  }

  template <typename... Args>
  void row(const Args&... args) {
    write_cells({cell(args)...});
  }
  void write_cells(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

 private:
  std::ofstream out_;
};

// Minimal reader for the CSVs this tool writes (quoted fields allowed).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
  double number(std::size_t row, const std::string& name) const;
  const std::string& text(std::size_t row, const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

// manifest.json is written before any data file and rewritten once the
// command finishes.
class Manifest {
 public:
  Manifest(std::filesystem::path dir, std::string command, std::vector<std::string> args);

  nlohmann::ordered_json& inputs() { return j_["inputs"]; }
  nlohmann::ordered_json& seeds() { return j_["seeds"]; }
  nlohmann::ordered_json& thresholds() { return j_["thresholds"]; }
  nlohmann::ordered_json& counts() { return j_["token_counts"]; }
  void output(const std::string& file);
  void begin();
  void finish();

 private:
  std::filesystem::path dir_;
  nlohmann::ordered_json j_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace unrn::cli
