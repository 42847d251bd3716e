#ifndef CSR_CLI_HPP
#define CSR_CLI_HPP

#include <string>
#include <vector>

namespace csr {

// Dispatches train / infer / sweep / probe / degrade / selftest.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

// Fast built-in invariant suite; returns the number of failed checks.
int run_selftest();

}  // namespace csr

#endif
