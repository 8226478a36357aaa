#include <iostream>

#include "relformer/cli.hpp"

int main(int argc, char** argv) { return relformer::run_cli(argc, argv, std::cout, std::cerr); }
