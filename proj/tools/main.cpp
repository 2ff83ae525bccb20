#include "bronchodepth/cli.hpp"

int main(int argc, char** argv) { return bronchodepth::cli::main(argc, argv); }
