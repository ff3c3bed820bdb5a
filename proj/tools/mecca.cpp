#include <iostream>

#include "mecca/cli.hpp"

int main(int argc, char** argv) { return mecca::run_cli(argc, argv, std::cin, std::cout, std::cerr); }
