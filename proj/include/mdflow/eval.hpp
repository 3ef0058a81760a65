#pragma once

#include "mdflow/common.hpp"
#include "mdflow/domain.hpp"
#include "mdflow/synthdata.hpp"

#include <cmath>
#include <map>
#include <vector>

namespace mdflow {

inline void require_aligned(const GridF& a, const GridF& b, const char* what) {
    require(a.same_shape(b), std::string(what) + ": grids are not aligned");
}

// Mean absolute error between two aligned grids; values in [-1,1] bound it
// by 2.
inline double mae(const GridF& a, const GridF& b) {
    require_aligned(a, b, "mae");
    require(a.numel() > 0, "mae: empty grids");
    double sum = 0;
    for (size_t i = 0; i < a.v.size(); ++i) sum += std::abs(double(a.v[i]) - double(b.v[i]));
    return sum / double(a.v.size());
}

// Faithfulness of a label against the label analytically re-extracted from
// an image (generated or real): quantize the image to the known color
// vocabulary, recompute the label, compare by MAE.
inline double reextract_consistency(const GridF& image, const GridF& label,
                                    const DomainSpec& domain) {
    require(image.h == label.h && image.w == label.w,
            "reextract_consistency: image and label are not aligned");
    GridF re;
    if (domain.name == "edge")
        re = reextract_edge(image);
    else if (domain.name == "depthlike")
        re = reextract_depthlike(image);
    else if (domain.name == "segmentation")
        re = reextract_segmentation(image);
    else
        throw ConfigError("reextract_consistency: no extractor for domain " + domain.name);
    return mae(label, re);
}

// Absolute mean relative error. Ground truth is affinely rescaled from
// [-1,1] to [0.1, 1.1] before the division so it is strictly positive; the
// prediction gets the same map.
inline double absrel(const GridF& pred, const GridF& gt) {
    require_aligned(pred, gt, "absrel");
    require(gt.numel() > 0, "absrel: empty grids");
    double sum = 0;
    for (size_t i = 0; i < gt.v.size(); ++i) {
        const double g = 0.1 + (double(gt.v[i]) + 1.0) * 0.5;
        const double p = 0.1 + (double(pred.v[i]) + 1.0) * 0.5;
        require(g > 0, "absrel: nonpositive ground truth after rescale");
        sum += std::abs(p - g) / g;
    }
    return sum / double(gt.v.size());
}

struct SegScores {
    std::vector<double> iou;      // per anchor class; NaN when absent from both
    double miou = 0;              // mean over classes present in pred or gt
};

inline int nearest_anchor(const std::vector<Color3>& palette, float r, float g, float b) {
    int best = 0;
    float best_d = std::numeric_limits<float>::max();
    for (size_t a = 0; a < palette.size(); ++a) {
        const float dr = palette[a].r - r, dg = palette[a].g - g, db = palette[a].b - b;
        const float d2 = dr * dr + dg * dg + db * db;
        if (d2 < best_d) {
            best_d = d2;
            best = int(a);
        }
    }
    return best;
}

// Accumulates intersection/union counts per anchor class; usable per pair or
// across a whole evaluation set.
struct SegConfusion {
    std::vector<uint64_t> inter, pred_count, gt_count;

    explicit SegConfusion(size_t classes = 0)
        : inter(classes, 0), pred_count(classes, 0), gt_count(classes, 0) {}

    void add(const GridF& pred, const GridF& gt, const std::vector<Color3>& palette) {
        require_aligned(pred, gt, "seg_accuracy");
        require(pred.c == 3, "seg_accuracy: palette grids must have 3 channels");
        if (inter.empty()) *this = SegConfusion(palette.size());
        for (int y = 0; y < pred.h; ++y)
            for (int x = 0; x < pred.w; ++x) {
                const int pa =
                    nearest_anchor(palette, pred.at(y, x, 0), pred.at(y, x, 1), pred.at(y, x, 2));
                const int ga =
                    nearest_anchor(palette, gt.at(y, x, 0), gt.at(y, x, 1), gt.at(y, x, 2));
                // inputs must already be snapped: quantizing may not move them
                require(std::abs(pred.at(y, x, 0) - palette[size_t(pa)].r) < 1e-6f &&
                            std::abs(gt.at(y, x, 0) - palette[size_t(ga)].r) < 1e-6f,
                        "seg_accuracy: grid is not snapped to the palette");
                pred_count[size_t(pa)] += 1;
                gt_count[size_t(ga)] += 1;
                if (pa == ga) inter[size_t(pa)] += 1;
            }
    }

    SegScores scores() const {
        SegScores s;
        double sum = 0;
        int present = 0;
        for (size_t c = 0; c < inter.size(); ++c) {
            const uint64_t uni = pred_count[c] + gt_count[c] - inter[c];
            if (uni == 0) {
                s.iou.push_back(std::numeric_limits<double>::quiet_NaN());
                continue;  // absent from both: excluded from the mean
            }
            const double iou = double(inter[c]) / double(uni);
            s.iou.push_back(iou);
            sum += iou;
            ++present;
        }
        s.miou = present ? sum / present : 0.0;
        return s;
    }
};

inline SegScores seg_accuracy(const GridF& pred, const GridF& gt,
                              const std::vector<Color3>& palette) {
    SegConfusion conf(palette.size());
    conf.add(pred, gt, palette);
    return conf.scores();
}

// Per-pixel mean for continuous domains; per-pixel majority anchor for
// palette domains, ties broken toward the lowest anchor id.
inline GridF ensemble(const std::vector<GridF>& samples, const DomainSpec& domain) {
    require(!samples.empty(), "ensemble: empty sample list");
    for (size_t i = 1; i < samples.size(); ++i)
        require_aligned(samples[0], samples[i], "ensemble");

    if (domain.kind == DomainKind::Continuous) {
        GridF out(samples[0].h, samples[0].w, samples[0].c);
        for (size_t i = 0; i < out.v.size(); ++i) {
            double sum = 0;
            for (const auto& s : samples) sum += double(s.v[i]);
            out.v[i] = float(sum / double(samples.size()));
        }
        return out;
    }

    const auto& palette = domain.palette;
    require(!palette.empty(), "ensemble: palette domain without anchors");
    GridF out(samples[0].h, samples[0].w, 3);
    std::vector<int> votes(palette.size());
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x) {
            std::fill(votes.begin(), votes.end(), 0);
            for (const auto& s : samples)
                votes[size_t(nearest_anchor(palette, s.at(y, x, 0), s.at(y, x, 1),
                                            s.at(y, x, 2)))] += 1;
            int best = 0;
            for (size_t a = 1; a < palette.size(); ++a)
                if (votes[a] > votes[size_t(best)]) best = int(a);
            out.at(y, x, 0) = palette[size_t(best)].r;
            out.at(y, x, 1) = palette[size_t(best)].g;
            out.at(y, x, 2) = palette[size_t(best)].b;
        }
    return out;
}

// Mean grid over a set of aligned grids (the mean-predictor baseline).
inline GridF mean_grid(const std::vector<GridF>& grids) {
    require(!grids.empty(), "mean_grid: empty list");
    GridF out(grids[0].h, grids[0].w, grids[0].c);
    for (const auto& g : grids) {
        require_aligned(grids[0], g, "mean_grid");
        for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += g.v[i];
    }
    for (auto& v : out.v) v /= float(grids.size());
    return out;
}

struct EvalRow {
    std::string task, domain, metric;
    double value = 0;
    uint64_t n_samples = 0;
    uint64_t seed = 0;
};

inline void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write eval report: " + path);
    os << "task,domain,metric,value,n_samples,seed\n";
    for (const auto& r : rows)
        os << r.task << "," << r.domain << "," << r.metric << "," << r.value << ","
           << r.n_samples << "," << r.seed << "\n";
}

}  // namespace mdflow
