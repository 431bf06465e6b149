#include "protostyle/cli.hpp"

int main(int argc, char** argv) { return protostyle::cli_main(argc, argv, std::cout, std::cerr); }
