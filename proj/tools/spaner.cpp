#include <iostream>

#include "spaner/cli.hpp"

int main(int argc, char** argv) { return spaner::cli::run(argc, argv, std::cout, std::cerr); }
