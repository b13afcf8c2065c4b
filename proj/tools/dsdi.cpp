// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "dsdi/cli.hpp"

int main(int argc, char** argv) { return dsdi::run_cli(argc, argv, std::cout, std::cerr); }
