#include <iostream>

#include "miar/cli.hpp"

int main(int argc, char** argv) { return miar::cli::dispatch(argc, argv, std::cout, std::cerr); }
