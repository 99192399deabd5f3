// Copyright 2026 The TriFormer Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "triformer/cli.hpp"

int main(int argc, char** argv) {
  return triformer::cli::run({argv + 1, argv + argc}, std::cout, std::cerr);
}
