#include "tlnet/cli.hpp"

int main(int argc, char** argv) { return tlnet::cli::run(argc, argv); }
