#include "mdflow/roleswitch.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace mdflow;

TEST_CASE("forced patterns") {
    Rng rng(1);
    TaskMix joint_only{1, 0, 0, 0};
    for (int i = 0; i < 10; ++i) {
        const auto r = sample_roles(3, rng, joint_only);
        REQUIRE(r.size() == 4);
        for (Role role : r) CHECK(role == Role::G);
    }

    TaskMix percept_only{0, 0, 1, 0};
    const auto r = sample_roles(2, rng, percept_only);
    CHECK(r[0] == Role::C);
    CHECK(r[1] == Role::G);
    CHECK(r[2] == Role::G);
    CHECK(format_roles(r) == "CGG");
}

TEST_CASE("controllable pattern: image G, nonempty C subset, rest X") {
    Rng rng(2);
    TaskMix ctrl_only{0, 1, 0, 0};
    for (int i = 0; i < 500; ++i) {
        const auto r = sample_roles(3, rng, ctrl_only);
        CHECK(r[0] == Role::G);
        int n_c = 0;
        for (size_t m = 1; m < r.size(); ++m) {
            CHECK(r[m] != Role::G);
            n_c += r[m] == Role::C;
        }
        CHECK(n_c >= 1);
    }
}

TEST_CASE("random pattern: never G-free, frequencies match the renormalized law") {
    Rng rng(3);
    TaskMix random_only{0, 0, 0, 1};
    const int M = 3, total = M + 1, n = 10000;
    std::vector<std::array<int, 3>> counts(size_t(total), {0, 0, 0});
    for (int i = 0; i < n; ++i) {
        const auto r = sample_roles(M, rng, random_only);
        REQUIRE(has_generate_role(r));
        for (int m = 0; m < total; ++m) ++counts[size_t(m)][size_t(r[size_t(m)])];
    }
    // conditioning on ">= 1 G anywhere": P(r_m=G | any G) = p_g / (1 - (1-p_g)^T),
    // P(r_m=C | any G) = p_c (1 - (1-p_g)^{T-1}) / (1 - (1-p_g)^T)
    const double pg = random_only.p_g, pc = random_only.p_c, px = random_only.p_x;
    const double no_g_all = std::pow(1 - pg, total);
    const double no_g_rest = std::pow(1 - pg, total - 1);
    const double q_g = pg / (1 - no_g_all);
    const double q_c = pc * (1 - no_g_rest) / (1 - no_g_all);
    const double q_x = px * (1 - no_g_rest) / (1 - no_g_all);
    for (int m = 0; m < total; ++m) {
        const double probs[3] = {q_g, q_c, q_x};
        for (int role = 0; role < 3; ++role) {
            const double freq = double(counts[size_t(m)][size_t(role)]) / n;
            const double sigma = std::sqrt(probs[role] * (1 - probs[role]) / n);
            INFO("domain " << m << " role " << role);
            CHECK(std::abs(freq - probs[role]) < 3 * sigma + 1e-9);
        }
    }
}

TEST_CASE("default mix never yields a G-free vector over 10^4 draws") {
    Rng rng(4);
    TaskMix mix;
    for (int i = 0; i < 10000; ++i) REQUIRE(has_generate_role(sample_roles(3, rng, mix)));
}

TEST_CASE("sample_roles validation") {
    Rng rng(5);
    TaskMix mix;
    CHECK_THROWS_AS(sample_roles(0, rng, mix), ConfigError);
    TaskMix bad{0.5, 0.5, 0.5, 0};
    CHECK_THROWS_AS(sample_roles(2, rng, bad), ConfigError);
}

TEST_CASE("switch endpoints and formula") {
    Rng rng(6);
    Mat<float> y0(4, 6), eps(4, 6);
    for (Eigen::Index i = 0; i < y0.size(); ++i) {
        y0.data()[i] = float(rng.normal());
        eps.data()[i] = float(rng.normal());
    }

    SECTION("G at t=0 returns y0 bitwise") {
        const Mat<float> out = switch_tokens(y0, Role::G, 0.0f, &eps);
        CHECK((out.array() == y0.array()).all());
    }
    SECTION("G at t=1 returns eps bitwise") {
        const Mat<float> out = switch_tokens(y0, Role::G, 1.0f, &eps);
        CHECK((out.array() == eps.array()).all());
    }
    SECTION("direct evaluation at t=0.25") {
        Mat<float> a(1, 1), b(1, 1);
        a << 1.0f;
        b << -1.0f;
        const Mat<float> out = switch_tokens(a, Role::G, 0.25f, &b);
        CHECK(out(0, 0) == 0.5f);
    }
    SECTION("C passes through exactly for any t") {
        for (float t : {0.0f, 0.3f, 0.99f}) {
            const Mat<float> out = switch_tokens(y0, Role::C, t);
            CHECK((out.array() == y0.array()).all());
        }
    }
    SECTION("X is exactly zero") {
        const Mat<float> out = switch_tokens(y0, Role::X, 0.7f);
        CHECK(out.cwiseAbs().maxCoeff() == 0.0f);
    }
    SECTION("G without noise throws") {
        CHECK_THROWS_AS(switch_tokens(y0, Role::G, 0.5f), ConfigError);
    }
    SECTION("G output is affine in t") {
        const Mat<float> a = switch_tokens(y0, Role::G, 0.2f, &eps);
        const Mat<float> b = switch_tokens(y0, Role::G, 0.6f, &eps);
        const Mat<float> mid = switch_tokens(y0, Role::G, 0.4f, &eps);
        CHECK(((a + b) / 2 - mid).cwiseAbs().maxCoeff() < 1e-6f);
    }
}

TEST_CASE("keep_mask layout") {
    SECTION("all G gives all ones") {
        const auto m = keep_mask({Role::G, Role::G}, 3);
        for (uint8_t v : m) CHECK(v == 1);
    }
    SECTION("roles GX, N=2") {
        const auto m = keep_mask({Role::G, Role::X}, 2);
        REQUIRE(m.size() == 4);
        CHECK(m[0] == 1);
        CHECK(m[1] == 1);
        CHECK(m[2] == 0);
        CHECK(m[3] == 0);
    }
    SECTION("roles CXG zeroes exactly the middle block") {
        const auto m = keep_mask({Role::C, Role::X, Role::G}, 4);
        int zeros = 0;
        for (uint8_t v : m) zeros += v == 0;
        CHECK(zeros == 4);
        for (int i = 4; i < 8; ++i) CHECK(m[size_t(i)] == 0);
    }
}

TEST_CASE("role string round-trip") {
    const auto r = parse_roles("GCXG");
    CHECK(format_roles(r) == "GCXG");
    CHECK_THROWS_AS(parse_roles("GQ"), ConfigError);
    CHECK_THROWS_AS(parse_roles(""), ConfigError);
}
