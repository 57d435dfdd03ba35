#include <iostream>

#include "dcsd/cli.hpp"

int main(int argc, char** argv) { return dcsd::cli_main(argc, argv, std::cout, std::cerr); }
