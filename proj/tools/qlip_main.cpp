// SPDX-License-Identifier: Apache-2.0
#include <iostream>

#include "qlip/cli.hpp"

int main(int argc, char** argv) { return qlip::run_cli({argv, argv + argc}, std::cout, std::cerr); }
