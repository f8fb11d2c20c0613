#include <iostream>

#include "uccl/cli.hpp"

int main(int argc, char** argv) { return uccl::run_cli(argc, argv, std::cout, std::cerr); }
