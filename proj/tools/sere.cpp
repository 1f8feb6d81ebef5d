#include <iostream>

#include "sere/cli.hpp"

int main(int argc, char** argv) {
    return sere::cli_main(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
