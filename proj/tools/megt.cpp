#include <iostream>

#include "megt/cli.hpp"

int main(int argc, char** argv) {
  return megt::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
