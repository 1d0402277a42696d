#include "dmadapter/cli.hpp"

int main(int argc, char** argv) { return dmadapter::run_cli(argc, argv); }
