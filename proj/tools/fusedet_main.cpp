#include <iostream>

#include "fusedet/cli.hpp"

int main(int argc, char** argv) {
  return fusedet::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
