// Copyright 2026 The chunkllm Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "chunkllm/cli/app.hpp"

int main(int argc, char** argv) { return chunkllm::cli::run(argc, argv, std::cout, std::cerr); }
