#include "nvs/cli.hpp"

int main(int argc, char** argv) { return nvs::cli::run(argc, argv); }
