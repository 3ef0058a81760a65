#pragma once

#include "mdflow/common.hpp"

namespace mdflow {

// Patchified view of one domain: N = h*w tokens, each token the flattened
// f*f*C pixel block at its grid position (row-major dy, dx, c).
template <typename T>
struct TokenField {
    int domain = 0;
    int h = 0, w = 0;  // token grid
    int f = 1;         // patch factor
    int channels = 0;
    Mat<T> tok;        // (h*w) x (channels*f*f)

    int tokens() const { return h * w; }
    int dim() const { return channels * f * f; }
};

// Lossless space-to-depth. decode(encode(x)) == x bit-exactly.
template <typename T>
TokenField<T> encode(const Grid<T>& g, int f, int domain = 0) {
    require(f >= 1, "patch factor must be >= 1");
    require(g.h % f == 0 && g.w % f == 0,
            "grid dimensions must be divisible by the patch factor");
    TokenField<T> out;
    out.domain = domain;
    out.h = g.h / f;
    out.w = g.w / f;
    out.f = f;
    out.channels = g.c;
    out.tok.resize(out.tokens(), out.dim());
    for (int ty = 0; ty < out.h; ++ty)
        for (int tx = 0; tx < out.w; ++tx) {
            T* row = out.tok.row(ty * out.w + tx).data();
            int k = 0;
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    for (int c = 0; c < g.c; ++c)
                        row[k++] = g.at(ty * f + dy, tx * f + dx, c);
        }
    return out;
}

template <typename T>
Grid<T> decode(const TokenField<T>& tf) {
    require(tf.tok.rows() == tf.h * tf.w, "token count does not match grid");
    require(tf.tok.cols() == tf.channels * tf.f * tf.f,
            "token dim does not match channels*f^2");
    Grid<T> g(tf.h * tf.f, tf.w * tf.f, tf.channels);
    for (int ty = 0; ty < tf.h; ++ty)
        for (int tx = 0; tx < tf.w; ++tx) {
            const T* row = tf.tok.row(ty * tf.w + tx).data();
            int k = 0;
            for (int dy = 0; dy < tf.f; ++dy)
                for (int dx = 0; dx < tf.f; ++dx)
                    for (int c = 0; c < tf.channels; ++c)
                        g.at(ty * tf.f + dy, tx * tf.f + dx, c) = row[k++];
        }
    return g;
}

}  // namespace mdflow
