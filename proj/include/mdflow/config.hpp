#pragma once

#include "mdflow/common.hpp"
#include "mdflow/model.hpp"
#include "mdflow/train.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>

namespace mdflow {

// Flat view of everything the train/sample pipeline needs. Loaded from an
// INI-style file ([section] + key = value); every field has a CLI flag of
// the same name that overrides the file.
struct PipelineConfig {
    std::string data_path;

    // [model]
    int width = 128;
    int depth = 6;
    int heads = 4;
    int ffn_dim = 256;
    int patch = 4;
    double eps_den = 1e-8;

    // [train]
    uint64_t steps = 15000;
    int batch = 32;
    double lr = 4e-4;
    int warmup_steps = 500;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    double desc_dropout = 0.1;
    double mix_joint = 0.3, mix_controllable = 0.3, mix_perception = 0.3, mix_random = 0.1;
    double p_g = 0.4, p_c = 0.4, p_x = 0.2;
    uint64_t seed = 0;
    int workers = 2;
    uint64_t checkpoint_every = 1000;
    uint64_t log_every = 50;

    // [sample]
    int sample_steps = 0;     // 0 = mode default
    double cfg_scale = -1;    // <0 = mode default

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.steps = steps;
        tc.batch = batch;
        tc.lr = lr;
        tc.warmup_steps = warmup_steps;
        tc.beta1 = beta1;
        tc.beta2 = beta2;
        tc.adam_eps = adam_eps;
        tc.grad_clip = grad_clip;
        tc.desc_dropout = desc_dropout;
        tc.task_mix = {mix_joint, mix_controllable, mix_perception, mix_random, p_g, p_c, p_x};
        tc.seed = seed;
        tc.workers = workers;
        tc.checkpoint_every = checkpoint_every;
        tc.log_every = log_every;
        return tc;
    }

    // Model geometry comes from the dataset manifest; capacity from here.
    ModelConfig model_config(const DatasetManifest& m) const {
        ModelConfig mc;
        mc.label_domains = int(m.domains.size()) - 1;
        require(m.height % patch == 0 && m.width % patch == 0,
                "dataset resolution is not divisible by the patch factor");
        mc.grid_h = m.height / patch;
        mc.grid_w = m.width / patch;
        mc.patch = patch;
        mc.channels.clear();
        for (const auto& d : m.domains) mc.channels.push_back(d.channels);
        mc.width = width;
        mc.depth = depth;
        mc.heads = heads;
        mc.ffn_dim = ffn_dim;
        mc.descriptor_vocab = m.descriptor_vocab();
        mc.eps_den = eps_den;
        mc.validate();
        return mc;
    }

    void load_ini(const std::string& path);
    void write_ini(const std::string& path) const;
};

namespace detail {
inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}
}  // namespace detail

inline void PipelineConfig::load_ini(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line, section;
    while (std::getline(is, line)) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[' && line.back() == ']') {
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        require(eq != std::string::npos, "config line is not key = value: " + line);
        kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
    }
    auto geti = [&](const char* k, auto& dst) {
        auto it = kv.find(k);
        if (it == kv.end()) return;
        std::istringstream ss(it->second);
        ss >> dst;
        require(bool(ss), std::string("bad config value for ") + k + ": " + it->second);
    };
    geti("data", data_path);
    geti("width", width);
    geti("depth", depth);
    geti("heads", heads);
    geti("ffn_dim", ffn_dim);
    geti("patch", patch);
    geti("eps_den", eps_den);
    geti("steps", steps);
    geti("batch", batch);
    geti("lr", lr);
    geti("warmup_steps", warmup_steps);
    geti("beta1", beta1);
    geti("beta2", beta2);
    geti("adam_eps", adam_eps);
    geti("grad_clip", grad_clip);
    geti("desc_dropout", desc_dropout);
    geti("mix_joint", mix_joint);
    geti("mix_controllable", mix_controllable);
    geti("mix_perception", mix_perception);
    geti("mix_random", mix_random);
    geti("p_g", p_g);
    geti("p_c", p_c);
    geti("p_x", p_x);
    geti("seed", seed);
    geti("workers", workers);
    geti("checkpoint_every", checkpoint_every);
    geti("log_every", log_every);
    geti("sample_steps", sample_steps);
    geti("cfg_scale", cfg_scale);
}

inline void PipelineConfig::write_ini(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write config file: " + path);
    os << "data = " << data_path << "\n\n";
    os << "[model]\n";
    os << "width = " << width << "\n";
    os << "depth = " << depth << "\n";
    os << "heads = " << heads << "\n";
    os << "ffn_dim = " << ffn_dim << "\n";
    os << "patch = " << patch << "\n";
    os << "eps_den = " << eps_den << "\n\n";
    os << "[train]\n";
    os << "steps = " << steps << "\n";
    os << "batch = " << batch << "\n";
    os << "lr = " << lr << "\n";
    os << "warmup_steps = " << warmup_steps << "\n";
    os << "beta1 = " << beta1 << "\n";
    os << "beta2 = " << beta2 << "\n";
    os << "adam_eps = " << adam_eps << "\n";
    os << "grad_clip = " << grad_clip << "\n";
    os << "desc_dropout = " << desc_dropout << "\n";
    os << "mix_joint = " << mix_joint << "\n";
    os << "mix_controllable = " << mix_controllable << "\n";
    os << "mix_perception = " << mix_perception << "\n";
    os << "mix_random = " << mix_random << "\n";
    os << "p_g = " << p_g << "\n";
    os << "p_c = " << p_c << "\n";
    os << "p_x = " << p_x << "\n";
    os << "seed = " << seed << "\n";
    os << "workers = " << workers << "\n";
    os << "checkpoint_every = " << checkpoint_every << "\n";
    os << "log_every = " << log_every << "\n\n";
    os << "[sample]\n";
    os << "sample_steps = " << sample_steps << "\n";
    os << "cfg_scale = " << cfg_scale << "\n";
}

// Reads a binary P6 image back into a [-1,1] grid; `channels` 1 collapses
// RGB to the channel mean (the inverse of the grayscale export).
inline GridF read_ppm(const std::string& path, int channels = 3) {
    require(channels == 1 || channels == 3, "read_ppm: channels must be 1 or 3");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw IoError("not a binary PPM (P6): " + path);
    auto next_int = [&]() {
        // skip whitespace and '#' comments
        while (true) {
            int c = is.peek();
            if (c == '#') {
                std::string junk;
                std::getline(is, junk);
            } else if (std::isspace(c)) {
                is.get();
            } else {
                break;
            }
        }
        int v;
        is >> v;
        if (!is) throw IoError("bad PPM header: " + path);
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    require(maxval == 255, "read_ppm: only maxval 255 is supported");
    is.get();  // single whitespace before payload
    std::vector<unsigned char> raw(size_t(h) * w * 3);
    read_bytes(is, raw.data(), raw.size());
    GridF g(h, w, channels);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const size_t o = (size_t(y) * w + x) * 3;
            if (channels == 3) {
                for (int c = 0; c < 3; ++c)
                    g.at(y, x, c) = float(raw[o + size_t(c)]) / 127.5f - 1.0f;
            } else {
                const float mean = (float(raw[o]) + float(raw[o + 1]) + float(raw[o + 2])) / 3.0f;
                g.at(y, x, 0) = mean / 127.5f - 1.0f;
            }
        }
    return g;
}

}  // namespace mdflow
