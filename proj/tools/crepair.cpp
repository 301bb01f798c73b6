#include <string>
#include <vector>

#include "crepair/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return crepair::run_cli(std::move(args));
}
