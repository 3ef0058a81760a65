#pragma once

#include "mdflow/common.hpp"
#include "mdflow/domain.hpp"
#include "mdflow/io.hpp"
#include "mdflow/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace mdflow {

enum class ShapeKind : int { Circle = 0, Rectangle = 1, Triangle = 2 };

// One parametric primitive in normalized [0,1]^2 scene coordinates.
// The class id of a shape is its kind.
struct Shape {
    ShapeKind kind = ShapeKind::Circle;
    float cx = 0.5f, cy = 0.5f;
    float sx = 0.1f, sy = 0.1f;  // circle: sx = radius; rect: half extents; tri: circumradius
    Color3 fill;
    int fill_index = 0;  // index into class_fills()

    int class_id() const { return int(kind); }

    float area() const {
        switch (kind) {
            case ShapeKind::Circle: return 3.14159265f * sx * sx;
            case ShapeKind::Rectangle: return 4.0f * sx * sy;
            case ShapeKind::Triangle: return 1.2990381f * sx * sx;  // (3*sqrt(3)/4) r^2
        }
        return 0;
    }

    // Conservative bounding half extents, used for the canvas-margin invariant.
    float bound_x() const { return kind == ShapeKind::Rectangle ? sx : sx; }
    float bound_y() const { return kind == ShapeKind::Rectangle ? sy : sx; }
};

struct SceneConfig {
    int min_shapes = 1;
    int max_shapes = 3;
    float margin = 0.03f;
    float min_size = 0.10f;
    float max_size = 0.24f;

    void validate() const {
        require(min_shapes >= 1 && max_shapes >= min_shapes, "invalid shape count range");
        require(max_shapes <= kNumClasses * kFillsPerClass,
                "max_shapes exceeds the number of distinct fill colors");
        require(min_size > 0 && max_size >= min_size && max_size + margin < 0.5f,
                "invalid shape size range");
    }

    int descriptor_vocab() const { return max_shapes * kNumClasses; }
};

struct Scene {
    std::vector<Shape> shapes;  // draw order = z-order, later on top
    Color3 background;
    int background_index = 0;
    int descriptor_id = 0;
};

// ---------------------------------------------------------------------------
// Signed distance fields (negative inside), in scene units.

inline float sdf_circle(float px, float py, const Shape& s) {
    const float dx = px - s.cx, dy = py - s.cy;
    return std::sqrt(dx * dx + dy * dy) - s.sx;
}

inline float sdf_rect(float px, float py, const Shape& s) {
    const float qx = std::abs(px - s.cx) - s.sx;
    const float qy = std::abs(py - s.cy) - s.sy;
    const float ox = std::max(qx, 0.0f), oy = std::max(qy, 0.0f);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0f);
}

// Upward-pointing equilateral triangle with circumradius s.sx.
inline void triangle_vertices(const Shape& s, float v[3][2]) {
    const float r = s.sx;
    v[0][0] = s.cx;
    v[0][1] = s.cy - r;
    v[1][0] = s.cx - 0.8660254f * r;
    v[1][1] = s.cy + 0.5f * r;
    v[2][0] = s.cx + 0.8660254f * r;
    v[2][1] = s.cy + 0.5f * r;
}

inline float sdf_triangle(float px, float py, const Shape& s) {
    float v[3][2];
    triangle_vertices(s, v);
    float d = std::numeric_limits<float>::max();
    bool inside = true;
    for (int i = 0; i < 3; ++i) {
        const int j = (i + 1) % 3;
        const float ex = v[j][0] - v[i][0], ey = v[j][1] - v[i][1];
        const float wx = px - v[i][0], wy = py - v[i][1];
        const float t = std::clamp((wx * ex + wy * ey) / (ex * ex + ey * ey), 0.0f, 1.0f);
        const float bx = wx - ex * t, by = wy - ey * t;
        d = std::min(d, bx * bx + by * by);
        // interior is on the negative-cross side of every directed edge
        if (ex * wy - ey * wx > 0) inside = false;
    }
    return (inside ? -1.0f : 1.0f) * std::sqrt(d);
}

inline float sdf_shape(float px, float py, const Shape& s) {
    switch (s.kind) {
        case ShapeKind::Circle: return sdf_circle(px, py, s);
        case ShapeKind::Rectangle: return sdf_rect(px, py, s);
        case ShapeKind::Triangle: return sdf_triangle(px, py, s);
    }
    return 1.0f;
}

// Union SDF over all shapes; +inf-ish for an empty scene.
inline float sdf_scene(float px, float py, const Scene& scene) {
    float d = std::numeric_limits<float>::max();
    for (const auto& s : scene.shapes) d = std::min(d, sdf_shape(px, py, s));
    return d;
}

// Depthlike normalization: sdf / 0.5 canvas units, clamped to [-1, 1].
inline constexpr float kDepthScale = 0.5f;

inline void validate_scene(const Scene& scene, const SceneConfig& cfg) {
    require(!scene.shapes.empty() && int(scene.shapes.size()) <= cfg.max_shapes,
            "scene shape count out of range");
    for (const auto& s : scene.shapes) {
        require(s.cx - s.bound_x() >= cfg.margin - 1e-6f &&
                    s.cx + s.bound_x() <= 1.0f - cfg.margin + 1e-6f &&
                    s.cy - s.bound_y() >= cfg.margin - 1e-6f &&
                    s.cy + s.bound_y() <= 1.0f - cfg.margin + 1e-6f,
                "shape is not fully inside the canvas margin");
    }
}

inline int dominant_class(const Scene& scene) {
    int best = 0;
    float best_area = -1.0f;
    for (const auto& s : scene.shapes)
        if (s.area() > best_area) {
            best_area = s.area();
            best = s.class_id();
        }
    return best;
}

// Deterministic in (seed, config). Fill colors are drawn without replacement,
// so every shape (and the background) has a unique color; this makes color
// boundaries and occupancy boundaries coincide, which the analytic
// re-extraction relies on.
inline Scene gen_scene(uint64_t seed, const SceneConfig& cfg) {
    cfg.validate();
    Rng rng = Rng(0x5ce4eULL).fork(seed);
    Scene scene;

    const auto bgs = background_colors();
    scene.background_index = int(rng.below(bgs.size()));
    scene.background = bgs[size_t(scene.background_index)];

    const int n = cfg.min_shapes + int(rng.below(uint64_t(cfg.max_shapes - cfg.min_shapes + 1)));

    // shuffle the (class, fill) vocabulary and take the first n entries
    const auto fills = class_fills();
    std::array<int, kNumClasses * kFillsPerClass> order{};
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    for (size_t i = order.size() - 1; i > 0; --i)
        std::swap(order[i], order[rng.below(uint64_t(i + 1))]);

    for (int i = 0; i < n; ++i) {
        Shape s;
        s.fill_index = order[size_t(i)];
        s.kind = ShapeKind(s.fill_index / kFillsPerClass);
        s.fill = fills[size_t(s.fill_index)];
        s.sx = float(rng.uniform(cfg.min_size, cfg.max_size));
        s.sy = s.kind == ShapeKind::Rectangle ? float(rng.uniform(cfg.min_size, cfg.max_size))
                                              : s.sx;
        const float bx = s.bound_x(), by = s.bound_y();
        s.cx = float(rng.uniform(cfg.margin + bx, 1.0f - cfg.margin - bx));
        s.cy = float(rng.uniform(cfg.margin + by, 1.0f - cfg.margin - by));
        scene.shapes.push_back(s);
    }

    scene.descriptor_id = (n - 1) * kNumClasses + dominant_class(scene);
    validate_scene(scene, cfg);
    return scene;
}

// ---------------------------------------------------------------------------
// Rasterization and analytic label extraction. Pixel centers sample at
// ((x+0.5)/S, (y+0.5)/S) with S = max(H, W); coverage is the sign of the
// exact SDF, so rasters and distance fields agree by construction.

inline float px_to_scene(int p, int size_max) { return (float(p) + 0.5f) / float(size_max); }

// Topmost covering shape index per pixel, -1 for background.
inline std::vector<int> coverage_map(const Scene& scene, int H, int W) {
    const int S = std::max(H, W);
    std::vector<int> cover(size_t(H) * W, -1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const float sx = px_to_scene(x, S), sy = px_to_scene(y, S);
            for (int i = int(scene.shapes.size()) - 1; i >= 0; --i)
                if (sdf_shape(sx, sy, scene.shapes[size_t(i)]) <= 0.0f) {
                    cover[size_t(y) * W + x] = i;
                    break;
                }
        }
    return cover;
}

// Hard-edged render (no anti-aliasing).
inline GridF render_image(const Scene& scene, int H, int W) {
    require(H > 0 && W > 0, "render: canvas must be positive");
    GridF img(H, W, 3);
    const auto cover = coverage_map(scene, H, W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int c = cover[size_t(y) * W + x];
            const Color3& col = c < 0 ? scene.background : scene.shapes[size_t(c)].fill;
            img.at(y, x, 0) = col.r;
            img.at(y, x, 1) = col.g;
            img.at(y, x, 2) = col.b;
        }
    return img;
}

// Boundary indicator from a per-pixel region id map: a pixel is an edge iff
// any 4-neighbor belongs to a different region (both sides of every boundary
// get marked, i.e. everything within one pixel of it).
inline GridF edges_from_regions(const std::vector<int>& region, int H, int W) {
    GridF e(H, W, 1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int r = region[size_t(y) * W + x];
            bool edge = false;
            if (x > 0 && region[size_t(y) * W + x - 1] != r) edge = true;
            if (!edge && x + 1 < W && region[size_t(y) * W + x + 1] != r) edge = true;
            if (!edge && y > 0 && region[size_t(y - 1) * W + x] != r) edge = true;
            if (!edge && y + 1 < H && region[size_t(y + 1) * W + x] != r) edge = true;
            e.at(y, x, 0) = edge ? 1.0f : -1.0f;
        }
    return e;
}

inline GridF extract_label(const Scene& scene, const DomainSpec& domain, int H, int W) {
    const int S = std::max(H, W);
    if (domain.name == "edge") {
        return edges_from_regions(coverage_map(scene, H, W), H, W);
    }
    if (domain.name == "depthlike") {
        GridF g(H, W, 1);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const float d = scene.shapes.empty()
                                    ? 1.0f
                                    : sdf_scene(px_to_scene(x, S), px_to_scene(y, S), scene) /
                                          kDepthScale;
                g.at(y, x, 0) = clamp_unit(d);
            }
        return g;
    }
    if (domain.name == "segmentation") {
        const auto palette = domain.palette.empty() ? seg_palette() : domain.palette;
        require(int(palette.size()) == kNumClasses + 1,
                "segmentation palette must have one anchor per class plus background");
        GridF g(H, W, 3);
        const auto cover = coverage_map(scene, H, W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const int c = cover[size_t(y) * W + x];
                const Color3& a = c < 0 ? palette[size_t(kBackgroundClass)]
                                        : palette[size_t(scene.shapes[size_t(c)].class_id())];
                g.at(y, x, 0) = a.r;
                g.at(y, x, 1) = a.g;
                g.at(y, x, 2) = a.b;
            }
        return g;
    }
    throw ConfigError("unknown label domain kind: " + domain.name);
}

// ---------------------------------------------------------------------------
// Re-extraction from pixels. Quantizes an image to the known color
// vocabulary and recomputes labels analytically; on ground-truth renders this
// reproduces extract_label exactly.

inline std::vector<int> quantize_image(const GridF& img) {
    require(img.c == 3, "quantize: image must have 3 channels");
    const auto vocab = color_vocabulary();
    std::vector<int> q(size_t(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            q[size_t(y) * img.w + x] =
                nearest_color(vocab, img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2));
    return q;
}

inline GridF reextract_edge(const GridF& img) {
    return edges_from_regions(quantize_image(img), img.h, img.w);
}

inline GridF reextract_segmentation(const GridF& img) {
    const auto palette = seg_palette();
    const auto q = quantize_image(img);
    GridF g(img.h, img.w, 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const Color3& a = palette[size_t(vocab_color_class(q[size_t(y) * img.w + x]))];
            g.at(y, x, 0) = a.r;
            g.at(y, x, 1) = a.g;
            g.at(y, x, 2) = a.b;
        }
    return g;
}

// Discrete signed distance to the quantized color boundaries, same
// normalization as the scene extractor. Sign comes from whether the pixel
// quantizes to a background color.
inline GridF reextract_depthlike(const GridF& img) {
    const int H = img.h, W = img.w, S = std::max(H, W);
    const auto q = quantize_image(img);
    const GridF e = edges_from_regions(q, H, W);
    std::vector<std::pair<int, int>> boundary;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (e.at(y, x, 0) > 0) boundary.emplace_back(y, x);
    GridF g(H, W, 1);
    const int n_fills = kNumClasses * kFillsPerClass;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            float d2 = std::numeric_limits<float>::max();
            for (const auto& [by, bx] : boundary) {
                const float dy = float(by - y), dx = float(bx - x);
                d2 = std::min(d2, dy * dy + dx * dx);
            }
            float d = boundary.empty() ? 1.0f : std::sqrt(d2) / float(S) / kDepthScale;
            if (q[size_t(y) * W + x] < n_fills) d = -d;  // inside a shape
            g.at(y, x, 0) = clamp_unit(d);
        }
    return g;
}

// ---------------------------------------------------------------------------
// Dataset container: text manifest + fixed-size binary records. Each record
// is descriptor_id (u32 LE), per-domain f32 grids in row-major (y, x, c)
// order, then a CRC32 of the preceding payload.

struct Sample {
    std::vector<GridF> grids;  // per domain
    uint32_t descriptor_id = 0;
};

struct DatasetManifest {
    int version = 1;
    uint64_t count = 0;
    int height = 0, width = 0;
    uint64_t seed = 0;
    int max_shapes = 3;
    std::vector<DomainSpec> domains;

    size_t pixels_per_sample() const {
        size_t p = 0;
        for (const auto& d : domains) p += size_t(height) * width * d.channels;
        return p;
    }
    size_t record_size() const { return 4 + 4 * pixels_per_sample() + 4; }
    int descriptor_vocab() const { return max_shapes * kNumClasses; }
};

inline std::string manifest_path(const std::string& dir) { return dir + "/manifest.txt"; }
inline std::string records_path(const std::string& dir) { return dir + "/records.bin"; }

inline void write_manifest(const std::string& dir, const DatasetManifest& m) {
    std::ofstream os(manifest_path(dir));
    if (!os) throw IoError("cannot write manifest in " + dir);
    os << "version: " << m.version << "\n";
    os << "count: " << m.count << "\n";
    os << "height: " << m.height << "\n";
    os << "width: " << m.width << "\n";
    os << "seed: " << m.seed << "\n";
    os << "max_shapes: " << m.max_shapes << "\n";
    os << "domains: " << m.domains.size() << "\n";
    for (const auto& d : m.domains)
        os << "domain" << d.id << ": name=" << d.name << " channels=" << d.channels
           << " kind=" << (d.kind == DomainKind::Palette ? "palette" : "continuous") << "\n";
}

inline DatasetManifest read_manifest(const std::string& dir) {
    std::ifstream is(manifest_path(dir));
    if (!is) throw IoError("cannot open manifest in " + dir);
    DatasetManifest m;
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        std::string key = line.substr(0, colon);
        std::string val = line.substr(colon + 1);
        while (!val.empty() && val.front() == ' ') val.erase(val.begin());
        kv[key] = val;
    }
    try {
        m.version = std::stoi(kv.at("version"));
        m.count = std::stoull(kv.at("count"));
        m.height = std::stoi(kv.at("height"));
        m.width = std::stoi(kv.at("width"));
        m.seed = std::stoull(kv.at("seed"));
        m.max_shapes = std::stoi(kv.at("max_shapes"));
        const int nd = std::stoi(kv.at("domains"));
        std::vector<std::string> names;
        for (int i = 0; i < nd; ++i) {
            std::istringstream ss(kv.at("domain" + std::to_string(i)));
            std::string tok, name;
            while (ss >> tok)
                if (tok.rfind("name=", 0) == 0) name = tok.substr(5);
            names.push_back(name);
        }
        m.domains = domains_by_names(names);
    } catch (const std::out_of_range&) {
        throw IoError("manifest in " + dir + " is missing required fields");
    }
    require(m.version == 1, "unsupported dataset version");
    return m;
}

inline Sample generate_sample(const DatasetManifest& m, uint64_t index) {
    SceneConfig cfg;
    cfg.max_shapes = m.max_shapes;
    uint64_t mix = m.seed;
    const uint64_t scene_seed = splitmix64(mix) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    const Scene scene = gen_scene(scene_seed, cfg);
    Sample s;
    s.descriptor_id = uint32_t(scene.descriptor_id);
    s.grids.push_back(render_image(scene, m.height, m.width));
    for (size_t d = 1; d < m.domains.size(); ++d)
        s.grids.push_back(extract_label(scene, m.domains[d], m.height, m.width));
    return s;
}

inline void append_record(std::ostream& os, const DatasetManifest& m, const Sample& s) {
    std::vector<char> payload;
    payload.reserve(m.record_size() - 4);
    payload.resize(4);
    std::memcpy(payload.data(), &s.descriptor_id, 4);
    for (const auto& g : s.grids) {
        const size_t off = payload.size();
        payload.resize(off + g.v.size() * 4);
        std::memcpy(payload.data() + off, g.v.data(), g.v.size() * 4);
    }
    const uint32_t crc = crc32_bytes(payload.data(), payload.size());
    write_bytes(os, payload.data(), payload.size());
    os.write(reinterpret_cast<const char*>(&crc), 4);
}

// Writes `count` procedurally generated samples plus the manifest. Byte
// identical for identical (count, seed, domains, size).
inline DatasetManifest make_dataset(uint64_t count, uint64_t seed,
                                    const std::vector<DomainSpec>& domains, int H, int W,
                                    int max_shapes, const std::string& out_dir) {
    check_little_endian();
    validate_domains(domains);
    require(H > 0 && W > 0, "dataset canvas must be positive");
    ensure_dir(out_dir);

    DatasetManifest m;
    m.count = count;
    m.height = H;
    m.width = W;
    m.seed = seed;
    m.max_shapes = max_shapes;
    m.domains = domains;

    std::ofstream os(records_path(out_dir), std::ios::binary);
    if (!os) throw IoError("cannot write records in " + out_dir);
    for (uint64_t i = 0; i < count; ++i) append_record(os, m, generate_sample(m, i));
    os.flush();
    if (!os) throw IoError("short write in " + out_dir);
    write_manifest(out_dir, m);
    return m;
}

class DatasetReader {
public:
    explicit DatasetReader(const std::string& dir)
        : dir_(dir), manifest_(read_manifest(dir)) {
        check_little_endian();
        is_.open(records_path(dir), std::ios::binary);
        if (!is_) throw IoError("cannot open records in " + dir);
        is_.seekg(0, std::ios::end);
        const auto bytes = uint64_t(is_.tellg());
        require(bytes == manifest_.count * manifest_.record_size(),
                "records file size does not match manifest count");
    }

    const DatasetManifest& manifest() const { return manifest_; }
    uint64_t size() const { return manifest_.count; }

    Sample load(uint64_t index) {
        if (index >= manifest_.count)
            throw ConfigError("sample index " + std::to_string(index) + " out of range");
        const size_t rec = manifest_.record_size();
        std::vector<char> buf(rec);
        is_.seekg(std::streamoff(index * rec));
        read_bytes(is_, buf.data(), rec);

        uint32_t stored = 0;
        std::memcpy(&stored, buf.data() + rec - 4, 4);
        const uint32_t actual = crc32_bytes(buf.data(), rec - 4);
        if (stored != actual)
            throw IoError("checksum mismatch in record " + std::to_string(index));

        Sample s;
        std::memcpy(&s.descriptor_id, buf.data(), 4);
        size_t off = 4;
        for (const auto& d : manifest_.domains) {
            GridF g(manifest_.height, manifest_.width, d.channels);
            std::memcpy(g.v.data(), buf.data() + off, g.v.size() * 4);
            off += g.v.size() * 4;
            s.grids.push_back(std::move(g));
        }
        return s;
    }

    std::vector<Sample> load_batch(const std::vector<uint64_t>& indices) {
        std::vector<Sample> out;
        out.reserve(indices.size());
        for (uint64_t i : indices) out.push_back(load(i));
        return out;
    }

private:
    std::string dir_;
    DatasetManifest manifest_;
    std::ifstream is_;
};

}  // namespace mdflow
