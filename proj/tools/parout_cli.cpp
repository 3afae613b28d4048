#include "parout/cli.hpp"

int main(int argc, char** argv) { return parout::cli::run(argc, argv); }
