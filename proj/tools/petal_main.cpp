#include "petal/cli.hpp"

int main(int argc, char** argv) { return petal::cli::run(argc, argv); }
