#include "gcrl/cli.hpp"

int main(int argc, char** argv) { return gcrl::cli_main(argc, argv); }
