#include "scgan/cli.hpp"

int main(int argc, char** argv) { return scgan::cli::run(argc, argv); }
