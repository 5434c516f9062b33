#include "difgs/cli.hpp"

int main(int argc, char** argv) { return difgs::run_command(argc, argv); }
