#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dedit/gradcheck.hpp"

// Built-in invariant battery behind `dedit selftest` and `dedit gradcheck`:
// quick structural checks a fresh clone must pass before any training run is
// worth starting.

namespace dedit {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Runs every check; never throws. With `sabotage_frozen` set, a frozen weight
// is deliberately corrupted mid-check so the frozen-base detector can be seen
// to catch it (that one check is then expected to fail).
std::vector<CheckResult> run_selftest(bool sabotage_frozen = false);

// Finite-difference audit of the full training loss on a 2-block, d=64 model
// in 64-bit precision. Passing bar is max relative error < 1e-3.
FdReport run_gradcheck(int n_samples = 100, double h = 1e-4, std::uint64_t seed = 0);

}  // namespace dedit
