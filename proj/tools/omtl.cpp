#include "omtl/cli.hpp"

int main(int argc, char** argv) { return omtl::cli::dispatch(argc, argv); }
