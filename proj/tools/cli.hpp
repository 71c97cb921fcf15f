// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace mlora::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Entry point of the `mlora` tool; returns the process exit code.
int run(int argc, const char* const* argv);

}  // namespace mlora::cli
