#include "cli.hpp"

int main(int argc, char **argv) { return abltx::cli::run(argc, argv); }
