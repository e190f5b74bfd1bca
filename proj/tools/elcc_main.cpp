#include "elcc/io.hpp"

int main(int argc, char** argv) { return elcc::cli_main(argc, argv); }
