#include "cnc/cli.hpp"

int main(int argc, char** argv) { return cnc::cli::dispatch(argc, argv); }
