#include "fedwsidd/cli.hpp"

int main(int argc, char** argv) { return fedwsidd::cli::run(argc, argv); }
