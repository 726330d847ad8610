#include <iostream>

#include "pepdpo/cli.hpp"

int main(int argc, char** argv) { return pepdpo::cli::run(argc, argv, std::cout, std::cerr); }
