#include <iostream>
#include <string>
#include <vector>

#include "qcnn/cli.hpp"

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv + 1, argv + argc);
    return qcnn::cli::dispatch(args, std::cout, std::cerr);
}
