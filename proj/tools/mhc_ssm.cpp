#include <iostream>

#include "mhc/cli.hpp"

int main(int argc, char** argv) { return mhc::run_cli(argc, argv, std::cout, std::cerr); }
