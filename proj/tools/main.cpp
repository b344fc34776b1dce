#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"

int main(int argc, char** argv) {
    return ncchi::cli::dispatch(std::vector<std::string>(argv, argv + argc), std::cerr);
}
