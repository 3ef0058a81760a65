#include "mdflow/bench.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mdflow;

TEST_CASE("fit_scaling_exponent on synthetic tables") {
    const std::vector<int> m{1, 2, 4, 8};

    SECTION("linear time gives slope 1") {
        std::vector<double> t;
        for (int x : m) t.push_back(3.0 * x);
        CHECK(fit_scaling_exponent(m, t) == Catch::Approx(1.0).margin(1e-9));
    }
    SECTION("quadratic time gives slope 2") {
        std::vector<double> t;
        for (int x : m) t.push_back(0.5 * x * x);
        CHECK(fit_scaling_exponent(m, t) == Catch::Approx(2.0).margin(1e-9));
    }
    SECTION("fewer than 4 points is rejected") {
        CHECK_THROWS_AS(fit_scaling_exponent({1, 2, 4}, {1, 2, 4}), ConfigError);
    }
}

TEST_CASE("bench inputs are identical across variants for a fixed seed") {
    // indirect check: identical outputs imply identical inputs
    Rng rng = Rng(0xbe9cULL).fork(1000 + 2);
    (void)rng;
    const auto lin = bench_attention(AttnVariant::Linear, {2}, 16, 8, 2, 5, 1);
    const auto dense = bench_attention(AttnVariant::Dense, {2}, 16, 8, 2, 5, 1);
    REQUIRE(lin.size() == 1);
    REQUIRE(dense.size() == 1);
    CHECK(lin[0].domains == dense[0].domains);
    CHECK(lin[0].peak_bytes > 0);
    CHECK(dense[0].peak_bytes > lin[0].peak_bytes);  // dense materializes (MN)^2
}

TEST_CASE("dense variant over the guard is rejected") {
    CHECK_THROWS_AS(bench_attention(AttnVariant::Dense, {200}, 64, 8, 1, 3), ConfigError);
}

TEST_CASE("small measured scaling sanity (linear aux memory flat)") {
    const auto rows = bench_attention(AttnVariant::Linear, {1, 2, 4, 8}, 32, 16, 2, 7);
    REQUIRE(rows.size() == 4);
    // streaming kernel scratch does not grow with M
    for (size_t i = 1; i < rows.size(); ++i)
        CHECK(double(rows[i].peak_bytes) <= 1.3 * double(rows[i - 1].peak_bytes));
}
