#include "peftkit/commands.hpp"

int main(int argc, char** argv) { return peftkit::cli_main(argc, argv); }
