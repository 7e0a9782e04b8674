#include <iostream>

#include "doprompt/cli.hpp"

int main(int argc, char** argv) { return doprompt::cli::run(argc, argv, std::cout, std::cerr); }
