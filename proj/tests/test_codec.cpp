#include "mdflow/codec.hpp"
#include "mdflow/rng.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mdflow;

namespace {
GridF random_grid(Rng& rng, int h, int w, int c) {
    GridF g(h, w, c);
    for (auto& v : g.v) v = float(rng.uniform(-1.0, 1.0));
    return g;
}
}  // namespace

TEST_CASE("encode shapes and token layout") {
    Rng rng(1);
    const GridF g = random_grid(rng, 4, 4, 3);
    const auto tf = encode(g, 2);
    CHECK(tf.h == 2);
    CHECK(tf.w == 2);
    CHECK(tf.tokens() == 4);
    CHECK(tf.dim() == 12);

    // token (i,j) holds exactly the f x f x C block at (i*f, j*f), (dy,dx,c) order
    for (int ty = 0; ty < 2; ++ty)
        for (int tx = 0; tx < 2; ++tx) {
            int k = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    for (int c = 0; c < 3; ++c)
                        CHECK(tf.tok(ty * 2 + tx, k++) == g.at(ty * 2 + dy, tx * 2 + dx, c));
        }
}

TEST_CASE("f=1 tokens equal pixels") {
    Rng rng(2);
    const GridF g = random_grid(rng, 3, 5, 2);
    const auto tf = encode(g, 1);
    CHECK(tf.tokens() == 15);
    CHECK(tf.dim() == 2);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 5; ++x)
            for (int c = 0; c < 2; ++c) CHECK(tf.tok(y * 5 + x, c) == g.at(y, x, c));
}

TEST_CASE("constant grid gives constant tokens") {
    GridF g(6, 6, 1);
    for (auto& v : g.v) v = 0.375f;
    const auto tf = encode(g, 3);
    for (Eigen::Index i = 0; i < tf.tok.size(); ++i) CHECK(tf.tok.data()[i] == 0.375f);
}

TEST_CASE("round-trip is bit-exact on random grids") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const int f = 1 + int(rng.below(4));
        const int h = f * (1 + int(rng.below(6)));
        const int w = f * (1 + int(rng.below(6)));
        const int c = 1 + int(rng.below(4));
        const GridF g = random_grid(rng, h, w, c);
        const GridF back = decode(encode(g, f));
        REQUIRE(back.v == g.v);
    }
}

TEST_CASE("single nonzero token entry maps to the right pixel") {
    TokenField<float> tf;
    tf.h = tf.w = 2;
    tf.f = 2;
    tf.channels = 1;
    tf.tok = Mat<float>::Zero(4, 4);
    // token (1,0), entry (dy=1, dx=0, c=0) -> flat index 1*2*1 + 0*1 + 0 = 2
    tf.tok(2, 2) = 7.0f;
    const GridF g = decode(tf);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x)
            CHECK(g.at(y, x, 0) == ((y == 3 && x == 0) ? 7.0f : 0.0f));
}

TEST_CASE("linearity of encode") {
    Rng rng(4);
    const GridF x = random_grid(rng, 8, 8, 3), y = random_grid(rng, 8, 8, 3);
    GridF combo(8, 8, 3);
    const float a = 1.5f, b = -0.25f;
    for (size_t i = 0; i < combo.v.size(); ++i) combo.v[i] = a * x.v[i] + b * y.v[i];
    const auto ex = encode(x, 4), ey = encode(y, 4), ec = encode(combo, 4);
    const Mat<float> expect = a * ex.tok + b * ey.tok;
    CHECK((ec.tok - expect).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("errors: non-divisible dimensions and inconsistent metadata") {
    GridF g(5, 4, 1);
    CHECK_THROWS_AS(encode(g, 2), ConfigError);

    TokenField<float> bad;
    bad.h = bad.w = 2;
    bad.f = 2;
    bad.channels = 1;
    bad.tok = Mat<float>::Zero(4, 3);  // dim should be 4
    CHECK_THROWS_AS(decode(bad), ConfigError);
}
