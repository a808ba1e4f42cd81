// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/cli.hpp"

int main(int argc, char** argv) { return mqlrec::run_cli(argc, argv); }
