// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#include "mohge/cli.hpp"

int main(int argc, char** argv) { return mohge::cli::run(argc, argv); }
