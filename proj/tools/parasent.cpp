#include "parasent/cli.hpp"

int main(int argc, char** argv) { return parasent::run_cli(argc, argv); }
