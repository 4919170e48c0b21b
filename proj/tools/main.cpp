#include "cli.hpp"

int main(int argc, char** argv) { return gsq::cli::run({argv, argv + argc}); }
