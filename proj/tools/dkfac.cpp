#include <iostream>

#include "dkfac/cli.hpp"

int main(int argc, char** argv) { return dkfac::cli::run_cli(argc, argv, std::cout, std::cerr); }
