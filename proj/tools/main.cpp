#include "shapreg/pipeline.hpp"

int main(int argc, char** argv) { return shapreg::run_cli(argc, argv); }
