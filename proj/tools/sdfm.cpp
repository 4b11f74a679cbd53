#include <iostream>
#include <string>
#include <vector>

#include "sdfm/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return sdfm::run_cli(args, std::cout, std::cerr);
}
