#include "apam/evalcli/cli.hpp"

int main(int argc, char** argv) { return apam::cli::run(argc, argv); }
