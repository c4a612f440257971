#include "p23d/cli.hpp"

int main(int argc, char **argv) { return p23d::cli_main(argc, argv); }
