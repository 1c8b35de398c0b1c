#pragma once

#include <cstdint>
#include <string_view>

namespace clsr {

std::uint64_t splitmix64(std::uint64_t x);

// Seed of a named sub-stream of `master`. Every RNG in the project is
// derived this way, e.g. derive_seed(seed, "negatives", user).
std::uint64_t derive_seed(std::uint64_t master, std::string_view label, std::uint64_t index = 0);

}  // namespace clsr
