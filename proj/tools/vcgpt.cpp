#include "vcgpt/cli.hpp"

int main(int argc, char** argv) { return vcgpt::cli::run_cli(argc, argv); }
