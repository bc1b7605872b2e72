#include "lumos/cli.hpp"

int main(int argc, char** argv) { return lumos::cli_main(argc, argv); }
