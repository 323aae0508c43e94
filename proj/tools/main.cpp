#include "mesurv/cli.hpp"

int main(int argc, char** argv) { return mesurv::cli::run_cli(argc, argv); }
