// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>

int main() {
    std::puts("tinymoe: cli under construction");
    return 0;
}
