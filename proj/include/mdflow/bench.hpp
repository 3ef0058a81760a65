#pragma once

#include "mdflow/attention.hpp"
#include "mdflow/common.hpp"
#include "mdflow/io.hpp"
#include "mdflow/rng.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

namespace mdflow {

enum class AttnVariant { Linear, Dense };

inline const char* variant_name(AttnVariant v) {
    return v == AttnVariant::Linear ? "linear" : "dense";
}

struct BenchRow {
    AttnVariant variant;
    int domains = 0, tokens_per_domain = 0, head_dim = 0, heads = 0;
    double median_ns = 0, p10_ns = 0, p90_ns = 0;
    size_t peak_bytes = 0;
    double cv = 0;  // coefficient of variation across repeats
};

// Times one attention variant on identical seeded inputs across the domain
// counts in m_list. Warmup runs are excluded; memory is the high-water mark
// of kernel-internal scratch, not process RSS.
inline std::vector<BenchRow> bench_attention(AttnVariant variant,
                                             const std::vector<int>& m_list, int n_per_domain,
                                             int head_dim, int heads, int repeats,
                                             uint64_t seed = 1, int warmup = 3) {
    require(!m_list.empty(), "bench: empty m_list");
    require(repeats >= 3, "bench: need at least 3 repeats");
    std::vector<BenchRow> rows;
    for (int m : m_list) {
        require(m >= 1, "bench: domain count must be positive");
        const Eigen::Index n = Eigen::Index(m) * n_per_domain;
        if (variant == AttnVariant::Dense)
            require(n <= kOracleMaxTokens, "bench: dense variant exceeds the size guard");

        // identical inputs for both variants at a given seed
        Rng rng = Rng(0xbe9cULL).fork(seed * 1000 + uint64_t(m));
        AttentionBatch<float> b;
        b.q.resize(n, Eigen::Index(head_dim) * heads);
        b.k.resize(n, Eigen::Index(head_dim) * heads);
        b.v.resize(n, Eigen::Index(head_dim) * heads);
        for (Eigen::Index i = 0; i < b.q.size(); ++i) {
            b.q.data()[i] = float(rng.normal());
            b.k.data()[i] = float(rng.normal());
            b.v.data()[i] = float(rng.normal());
        }
        b.mask.assign(size_t(n), 1);
        for (auto& mk : b.mask) mk = rng.uniform() < 0.125 ? 0 : 1;
        b.heads = heads;

        auto run_once = [&]() {
            if (variant == AttnVariant::Linear)
                return masked_linear_attention(b, 1e-8f);
            return masked_attention_oracle(b, 1e-8f);
        };

        for (int w = 0; w < warmup; ++w) {
            volatile float sink = run_once()(0, 0);
            (void)sink;
        }

        std::vector<double> times;
        size_t peak = 0;
        for (int r = 0; r < repeats; ++r) {
            WorkspaceMeter::reset();
            const auto t0 = std::chrono::steady_clock::now();
            volatile float sink = run_once()(0, 0);
            const auto t1 = std::chrono::steady_clock::now();
            (void)sink;
            peak = std::max(peak, WorkspaceMeter::peak_bytes());
            times.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        BenchRow row;
        row.variant = variant;
        row.domains = m;
        row.tokens_per_domain = n_per_domain;
        row.head_dim = head_dim;
        row.heads = heads;
        row.median_ns = times[times.size() / 2];
        row.p10_ns = times[times.size() / 10];
        row.p90_ns = times[times.size() * 9 / 10];
        row.peak_bytes = peak;
        double mean = 0, var = 0;
        for (double t : times) mean += t;
        mean /= double(times.size());
        for (double t : times) var += (t - mean) * (t - mean);
        row.cv = std::sqrt(var / double(times.size())) / mean;
        rows.push_back(row);
    }
    return rows;
}

// Least-squares slope of log(median time) against log(M).
inline double fit_scaling_exponent(const std::vector<BenchRow>& rows) {
    require(rows.size() >= 4, "fit_scaling_exponent: need at least 4 distinct M values");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = double(rows.size());
    for (const auto& r : rows) {
        const double x = std::log(double(r.domains));
        const double y = std::log(r.median_ns);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline double fit_scaling_exponent(const std::vector<int>& m, const std::vector<double>& t) {
    require(m.size() == t.size() && m.size() >= 4, "fit_scaling_exponent: need >= 4 points");
    std::vector<BenchRow> rows(m.size());
    for (size_t i = 0; i < m.size(); ++i) {
        rows[i].domains = m[i];
        rows[i].median_ns = t[i];
    }
    return fit_scaling_exponent(rows);
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write bench report: " + path);
    os << "variant,M,N,d,H,median_ns,p10_ns,p90_ns,peak_bytes\n";
    for (const auto& r : rows)
        os << variant_name(r.variant) << "," << r.domains << "," << r.tokens_per_domain << ","
           << r.head_dim << "," << r.heads << "," << uint64_t(r.median_ns) << ","
           << uint64_t(r.p10_ns) << "," << uint64_t(r.p90_ns) << "," << r.peak_bytes << "\n";
}

}  // namespace mdflow
