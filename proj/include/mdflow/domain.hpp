#pragma once

#include "mdflow/common.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace mdflow {

enum class DomainKind { Continuous, Palette };

struct Color3 {
    float r = 0, g = 0, b = 0;
};

inline float color_dist(const Color3& a, const Color3& b) {
    const float dr = a.r - b.r, dg = a.g - b.g, db = a.b - b.b;
    return std::sqrt(dr * dr + dg * dg + db * db);
}

// Static description of one visual domain. Domain 0 is always the image.
struct DomainSpec {
    int id = 0;
    std::string name;
    int channels = 0;
    DomainKind kind = DomainKind::Continuous;
    std::vector<Color3> palette;  // anchors, only for Palette domains
};

inline constexpr float kMinAnchorDist = 0.5f;

inline void validate_domains(const std::vector<DomainSpec>& domains) {
    require(!domains.empty(), "domain list is empty");
    require(domains[0].id == 0 && domains[0].name == "image" && domains[0].channels == 3,
            "domain 0 must be the 3-channel image domain");
    for (size_t i = 0; i < domains.size(); ++i) {
        const auto& d = domains[i];
        require(d.id == int(i), "domain ids must be contiguous 0..M");
        require(d.channels > 0, "domain " + d.name + ": channels must be positive");
        if (d.kind == DomainKind::Palette) {
            require(d.channels == 3, "palette domain " + d.name + " must have 3 channels");
            require(d.palette.size() >= 2 && d.palette.size() <= 6,
                    "palette domain " + d.name + " needs 2..6 anchors");
            for (size_t a = 0; a < d.palette.size(); ++a)
                for (size_t b = a + 1; b < d.palette.size(); ++b)
                    require(color_dist(d.palette[a], d.palette[b]) >= kMinAnchorDist,
                            "palette anchors of " + d.name + " are closer than 0.5");
        }
    }
}

// Shape classes of the synthetic world. The class of a shape is its kind.
inline constexpr int kNumClasses = 3;  // circle, rectangle, triangle
inline constexpr int kBackgroundClass = kNumClasses;

// Segmentation anchors, one per class plus background; mutually far apart.
inline std::vector<Color3> seg_palette() {
    return {
        {1.0f, -1.0f, -1.0f},   // circle
        {-1.0f, 1.0f, -1.0f},   // rectangle
        {-1.0f, -1.0f, 1.0f},   // triangle
        {0.9f, 0.9f, 0.9f},     // background
    };
}

// Fill colors of the image domain. Each class owns two fills; together with
// the two background colors every rendered color is unique in a scene, so
// color boundaries coincide with occupancy boundaries.
inline constexpr int kFillsPerClass = 2;

inline std::array<Color3, kNumClasses * kFillsPerClass> class_fills() {
    return {{
        {0.9f, -0.8f, -0.8f},   // circle: red
        {0.9f, 0.6f, -0.8f},    // circle: orange
        {-0.8f, 0.9f, -0.8f},   // rectangle: green
        {-0.8f, 0.9f, 0.9f},    // rectangle: cyan
        {-0.8f, -0.8f, 0.9f},   // triangle: blue
        {0.9f, -0.8f, 0.9f},    // triangle: magenta
    }};
}

inline std::array<Color3, 2> background_colors() {
    return {{{0.05f, 0.05f, 0.05f}, {-0.6f, -0.6f, -0.6f}}};
}

// Full color vocabulary (fills then backgrounds); used to quantize images
// when re-extracting labels from generated pixels.
inline std::vector<Color3> color_vocabulary() {
    std::vector<Color3> vocab;
    for (const auto& c : class_fills()) vocab.push_back(c);
    for (const auto& c : background_colors()) vocab.push_back(c);
    return vocab;
}

// Class of a vocabulary color index (fills map to their class, backgrounds
// to the background class).
inline int vocab_color_class(int vocab_index) {
    if (vocab_index < kNumClasses * kFillsPerClass) return vocab_index / kFillsPerClass;
    return kBackgroundClass;
}

inline int nearest_color(const std::vector<Color3>& vocab, float r, float g, float b) {
    int best = 0;
    float best_d2 = std::numeric_limits<float>::max();
    for (size_t i = 0; i < vocab.size(); ++i) {
        const float dr = vocab[i].r - r, dg = vocab[i].g - g, db = vocab[i].b - b;
        const float d2 = dr * dr + dg * dg + db * db;
        if (d2 < best_d2) {
            best_d2 = d2;
            best = int(i);
        }
    }
    return best;
}

// The default domain set shipped by the toy dataset.
inline std::vector<DomainSpec> default_domains() {
    std::vector<DomainSpec> ds(4);
    ds[0] = {0, "image", 3, DomainKind::Continuous, {}};
    ds[1] = {1, "edge", 1, DomainKind::Continuous, {}};
    ds[2] = {2, "depthlike", 1, DomainKind::Continuous, {}};
    ds[3] = {3, "segmentation", 3, DomainKind::Palette, seg_palette()};
    return ds;
}

inline std::vector<DomainSpec> domains_by_names(const std::vector<std::string>& names) {
    std::vector<DomainSpec> all = default_domains();
    std::vector<DomainSpec> out;
    out.push_back(all[0]);
    for (const auto& n : names) {
        if (n == "image") continue;
        bool found = false;
        for (const auto& d : all)
            if (d.name == n) {
                DomainSpec copy = d;
                copy.id = int(out.size());
                out.push_back(copy);
                found = true;
            }
        require(found, "unknown domain name: " + n);
    }
    validate_domains(out);
    return out;
}

}  // namespace mdflow
