#include "t2ldm/cli.hpp"

int main(int argc, char** argv) { return t2ldm::cli::parse_and_dispatch(argc, argv); }
