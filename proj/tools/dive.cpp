#include "dive/cli.hpp"

int main(int argc, char** argv) { return dive::run_cli(argc, argv); }
