#pragma once

#include <string>
#include <vector>

namespace esfm {

/// Command-line entry point. Subcommands: synth, reconstruct, train,
/// finetune, eval, gradcheck. Returns 0 on success, 2 on usage errors, 3 on
/// data errors, 4 on numerical failure.
int dispatch(const std::vector<std::string>& args);

}  // namespace esfm
