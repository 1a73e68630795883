#include "saak/cli.hpp"

int main(int argc, char** argv) { return saak::run_cli(argc, argv); }
