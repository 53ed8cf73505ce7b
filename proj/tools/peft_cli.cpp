#include "peft/cli/commands.hpp"

int main(int argc, char** argv) { return peft::cli::run(argc, argv); }
