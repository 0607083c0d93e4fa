#include <iostream>

#include "ccrm/cli.hpp"

int main(int argc, char** argv) { return ccrm::cli::run(argc, argv, std::cout, std::cerr); }
