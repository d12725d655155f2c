#include <iostream>

#include "mcammd/cli.hpp"

int main(int argc, char** argv) { return mcammd::cli::run(argc, argv, std::cout, std::cerr); }
