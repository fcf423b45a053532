#include "tweo/cli.hpp"

int main(int argc, char** argv) { return tweo::cli_main(argc, argv); }
