#include <iostream>

#include "rknet/cli.hpp"

int main(int argc, char** argv) {
  return rknet::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
