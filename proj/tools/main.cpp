#include <iostream>

#include "dfsar/cli.hpp"

int main(int argc, char** argv) { return dfsar::cli::run(argc, argv, std::cout, std::cerr); }
