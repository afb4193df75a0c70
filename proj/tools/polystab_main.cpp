#include "polystab/cli.hpp"

int main(int argc, char** argv) { return polystab::cli::run(argc, argv); }
