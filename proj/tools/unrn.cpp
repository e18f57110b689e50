#include "unrn/cli.hpp"

int main(int argc, char** argv) { return unrn::run_cli(argc, argv); }
