#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maunet {

struct GradCheckRow {
    std::string name;
    std::string group;  // "op", "block" or "loss"
    double max_rel_error = 0.0;
};

/// Central-difference checks of every differentiable primitive, block and
/// loss on inputs seeded from `seed`.
/// `corrupt_factor` != 1 scales the conv2d gradient on its way back, which
/// must make that row fail.
std::vector<GradCheckRow> run_gradcheck_suite(std::uint64_t seed, double corrupt_factor = 1.0);

}  // namespace maunet
