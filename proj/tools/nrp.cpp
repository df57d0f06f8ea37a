#include <iostream>

#include "nrp/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return nrp::cli::run(args, std::cout, std::cerr);
}
