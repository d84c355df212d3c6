#include <iostream>

#include "idp/cli.hpp"

int main(int argc, char** argv) { return idp::cli::run_cli(argc, argv, std::cout, std::cerr); }
