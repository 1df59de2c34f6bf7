#include "advpatch/cli.hpp"

int main(int argc, char** argv) { return advpatch::cli::run(argc, argv); }
