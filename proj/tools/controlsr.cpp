#include "csr/cli.hpp"

int main(int argc, char** argv) { return csr::run_cli(argc, argv); }
