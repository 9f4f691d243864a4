#include "sstx/cli.hpp"

int main(int argc, char** argv) { return sstx::cli_main(argc, argv); }
