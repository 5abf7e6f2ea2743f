#pragma once

#include <string>
#include <vector>

namespace velokit {

// Batch front-end. Subcommands: simulate, infer, rescale, uq, sweep,
// hitting, figures. Returns the process exit code: 0 success, 2 config
// error, 3 numerical failure. Every successful run writes a manifest.json
// next to its outputs.
int run_cli(const std::vector<std::string>& args);

}  // namespace velokit
