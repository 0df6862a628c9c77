#include <iostream>
#include <string>
#include <vector>

#include "curvereg/cli.hpp"

int main(int argc, char **argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return curvereg::run_cli(args, std::cout, std::cerr);
}
