#include <doctest.h>

#include <set>
#include <vector>

#include "mvmatch/rng.hpp"

using namespace mvmatch;

TEST_CASE("same seed gives the same stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform01 stays in [0, 1)") {
    Rng r(1);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform01();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("below covers its range without bias") {
    Rng r(3);
    std::vector<int> counts(7, 0);
    const int trials = 70000;
    for (int i = 0; i < trials; ++i) ++counts[r.below(7)];
    // Each bucket is Binomial(70000, 1/7): sd ~ 92.6, allow 5 sd.
    for (int c : counts) CHECK(std::abs(c - trials / 7) < 463);
    CHECK(r.below(1) == 0);
    CHECK(r.below(0) == 0);
}

TEST_CASE("normal draws have unit variance") {
    Rng r(9);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(sq / n - mean * mean - 1.0) < 0.05);
}

TEST_CASE("derived seeds separate streams by tag and index") {
    std::set<std::uint64_t> seen;
    for (const char* tag : {"batch", "augment", "views", "init", "mining"}) seen.insert(derive_seed(0, tag));
    for (std::uint64_t i = 0; i < 100; ++i) seen.insert(derive_seed(0, i));
    CHECK(seen.size() == 105);
    CHECK(derive_seed(1, "batch") != derive_seed(2, "batch"));
    CHECK(derive_seed(5, "x") == derive_seed(5, "x"));
}
