#include "deqff/cli.hpp"

int main(int argc, char** argv) { return deqff::cli::run_cli(argc, argv); }
