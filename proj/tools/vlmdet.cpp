#include "vlmdet/cli/cli.hpp"

int main(int argc, char** argv) { return vlmdet::cli::run_command(argc, argv); }
