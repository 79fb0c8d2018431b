#include "vdet/cli.hpp"

int main(int argc, char** argv) { return vdet::cli::run(argc, argv); }
