#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace bronchodepth::cli {

/// Root for run directories: $BRONCHODEPTH_RUNS_DIR, else ./runs.
std::filesystem::path runs_root();

/// Runs one subcommand (gen-data, train-sup, adapt, infer, eval, plot).
/// `args` excludes the program name. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int main(int argc, char** argv);

}  // namespace bronchodepth::cli
