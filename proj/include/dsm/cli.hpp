#pragma once

#include <string>
#include <vector>

// Command-line front end. Subcommands: gen-data, train, eval, infer,
// gradcheck, ablate. Exit codes: 0 success, 1 usage or contract violation,
// 2 malformed input data, 3 numerical failure.
namespace dsm::cli {

// argv convention matches main(): argv[0] is the program name.
int dispatch(int argc, const char* const* argv);

// Test entry point; `args` excludes the program name.
int dispatch(const std::vector<std::string>& args);

} // namespace dsm::cli
