#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdflow {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// User/config mistakes: bad flags, inconsistent shapes, invalid field values.
// The CLI maps these to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failures of the environment or of stored data: missing files, short reads,
// checksum mismatches. CLI exit code 3.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

template <typename T>
inline T clamp_unit(T v) {
    return v < T(-1) ? T(-1) : (v > T(1) ? T(1) : v);
}

// Dense pixel grid, row-major (y, x, channel), values in [-1, 1].
template <typename T>
struct Grid {
    int h = 0, w = 0, c = 0;
    std::vector<T> v;

    Grid() = default;
    Grid(int h_, int w_, int c_) : h(h_), w(w_), c(c_), v(size_t(h_) * w_ * c_, T(0)) {}

    T& at(int y, int x, int ch) { return v[(size_t(y) * w + x) * c + ch]; }
    const T& at(int y, int x, int ch) const { return v[(size_t(y) * w + x) * c + ch]; }
    size_t numel() const { return v.size(); }
    bool same_shape(const Grid& o) const { return h == o.h && w == o.w && c == o.c; }
};

using GridF = Grid<float>;

}  // namespace mdflow
