#include <vector>

#include "refine/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return refine::cli::run(args);
}
