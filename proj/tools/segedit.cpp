#include "segedit/cli.hpp"

int main(int argc, char** argv) { return segedit::run_cli(argc, argv); }
