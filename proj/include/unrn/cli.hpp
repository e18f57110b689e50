#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace unrn {

// Entry point of the `unrn` tool. Returns the process exit code:
// 0 success, 1 usage error, 2 data error, 3 numeric failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

// Builds plot tables from the outputs of earlier subcommands found anywhere
// under `in`. Returns the names of the tables written to `out`.
std::vector<std::string> write_report(const std::filesystem::path& in,
                                      const std::filesystem::path& out);

}  // namespace unrn
