// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end:
//
//   broadnas <search|derive|train|eval|compile|grid|report>
//            --config <file|preset> [--set key=value]... --out <dir>
//
// Exit status 0 on success, 2 on a configuration error (the offending field
// path goes to stderr as JSON), 1 on any other failure (diagnostics.json is
// written into the output directory).

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace broadnas {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

/// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Writes report.txt and reward_curve.csv for a run directory. Throws Error
/// naming the expected files when the search log is missing or empty.
void write_report(const std::filesystem::path& run_dir);

}  // namespace broadnas
