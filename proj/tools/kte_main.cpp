#include "kte/cli.hpp"

int main(int argc, char** argv) { return kte::cli_main(argc, argv); }
