#pragma once

#include <string>

#include "lrel/config.hpp"

namespace lrel {

// Subcommand entry points. Each is idempotent for a fixed (config, seed):
// rerunning produces byte-identical artifacts. All writes go through a
// write-then-rename, so interrupted runs never leave partial files in final
// paths. Errors surface as exceptions; the CLI maps them to exit codes.
void cmd_gen_corpus(const RunConfig& config);
void cmd_train(const RunConfig& config);
void cmd_estimate(const RunConfig& config);
void cmd_sweep(const RunConfig& config);
void cmd_project(const RunConfig& config);
void cmd_report(const RunConfig& config);

}  // namespace lrel
