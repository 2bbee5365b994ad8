#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace atroseg {

struct LayerCheck {
    std::string layer;
    double max_rel_error = 0.0;
    std::int64_t checked = 0;
    std::int64_t skipped = 0;
};

// Double-precision central-difference checks of every layer type's analytic
// gradient (inputs and parameters). `corrupt_hook` deliberately desynchronizes
// the first layer's forward value from its recorded gradient so the failure
// path can be exercised.
std::vector<LayerCheck> run_gradient_suite(std::uint64_t seed, bool corrupt_hook = false);

bool gradient_suite_passed(const std::vector<LayerCheck>& checks, double tolerance = 1e-4);

}  // namespace atroseg
