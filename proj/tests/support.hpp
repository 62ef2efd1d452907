#pragma once

#include <filesystem>
#include <string>

#include "mvmatch/imaging.hpp"
#include "mvmatch/rng.hpp"

namespace mvtest {

// Fresh, empty directory under the build tree.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::path(MVMATCH_TEST_TMP) / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline mvmatch::Image random_image(int h, int w, mvmatch::Rng& rng) {
    mvmatch::Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = rng.uniform01();
    return img;
}

// An Rng whose first uniform01() draw lands below (flip) or above (no flip) 0.5.
inline mvmatch::Rng rng_with_first_draw(bool below_half) {
    for (std::uint64_t seed = 0;; ++seed) {
        mvmatch::Rng probe(seed);
        if ((probe.uniform01() < 0.5) == below_half) return mvmatch::Rng(seed);
    }
}

}  // namespace mvtest
