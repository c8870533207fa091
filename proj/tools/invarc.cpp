#include "invarc/cli.hpp"

int main(int argc, char** argv) { return invarc::cli::run(argc, argv); }
