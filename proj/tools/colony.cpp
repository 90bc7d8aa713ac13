#include "colony/cli.hpp"

int main(int argc, char** argv) { return colony::cli::run(argc, argv); }
