#include <iostream>

#include "cdg/cli.hpp"

int main(int argc, char** argv) { return cdg::run_cli(argc, argv, std::cout, std::cerr); }
