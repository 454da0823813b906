#include <iostream>

#include "vcr/cli.hpp"

int main(int argc, char** argv) {
  return vcr::run_command({argv + 1, argv + argc}, std::cout, std::cerr);
}
