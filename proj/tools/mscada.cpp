#include <iostream>

#include "mscada/cli.hpp"

int main(int argc, char** argv) { return mscada::run_cli(argc, argv, std::cout, std::cerr); }
