#include "gift/cli.hpp"

int main(int argc, char** argv) { return gift::cli::main(argc, argv); }
