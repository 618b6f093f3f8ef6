#include "equiquant/cli.hpp"

int main(int argc, char** argv) { return equiquant::run(argc, argv); }
