#include "solidmark/cli.hpp"

int main(int argc, char** argv) { return solidmark::cli::run_cli(argc, argv); }
