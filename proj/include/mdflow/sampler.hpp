#pragma once

#include "mdflow/codec.hpp"
#include "mdflow/domain.hpp"
#include "mdflow/model.hpp"
#include "mdflow/rng.hpp"
#include "mdflow/roleswitch.hpp"

#include <string>
#include <vector>

namespace mdflow {

enum class SampleMode { Joint, Controllable, Perceive };

inline SampleMode parse_mode(const std::string& s) {
    if (s == "joint") return SampleMode::Joint;
    if (s == "controllable") return SampleMode::Controllable;
    if (s == "perceive") return SampleMode::Perceive;
    throw ConfigError("unknown mode: " + s + " (expected joint|controllable|perceive)");
}

enum class Integrator { Euler, Midpoint };

struct SamplerSettings {
    int steps = 20;
    double cfg_scale = 4.5;
    bool cfg_enabled = true;
    Integrator integrator = Integrator::Euler;

    void validate() const { require(steps >= 1, "sampler: steps must be >= 1"); }
};

// Classifier-free guidance: v = v_null + scale (v_cond - v_null). The scale-1
// and scale-0 cases short-circuit so the identities are exact.
template <typename T>
Mat<T> cfg_velocity(const Mat<T>& v_cond, const Mat<T>& v_null, T scale) {
    require(v_cond.rows() == v_null.rows() && v_cond.cols() == v_null.cols(),
            "cfg_velocity: shape mismatch");
    if (scale == T(1)) return v_cond;
    if (scale == T(0)) return v_null;
    return v_null + scale * (v_cond - v_null);
}

// One sampling request: roles fix which domains integrate (G), which hold
// clean conditioning tokens (C) and which are zeroed out (X).
template <typename T>
struct SampleRequest {
    RoleVector roles;
    std::vector<Mat<T>> conditions;  // per domain; used only for C roles
    int descriptor = 0;
};

// Rectified-flow integration from t=1 to t=0 for a batch of requests. G
// domains start as standard normal draws; C tokens are re-applied bit
// identically at every step; X domains stay zero. With cfg enabled every
// step runs a second pass under the null descriptor.
template <typename T>
std::vector<std::vector<Mat<T>>> integrate_flow(const Model<T>& model,
                                                const std::vector<SampleRequest<T>>& requests,
                                                const SamplerSettings& ss, Rng& rng) {
    ss.validate();
    const ModelConfig& cfg = model.cfg;
    const int S = int(requests.size());
    require(S >= 1, "integrate_flow: empty request batch");

    std::vector<ForwardInput<T>> state;
    state.resize(size_t(S));
    for (int s = 0; s < S; ++s) {
        const auto& req = requests[size_t(s)];
        require(int(req.roles.size()) == cfg.num_domains(), "integrate_flow: role length");
        require(has_generate_role(req.roles), "integrate_flow: no G domain to sample");
        auto& in = state[size_t(s)];
        in.roles = req.roles;
        in.descriptor = req.descriptor;
        in.y.resize(size_t(cfg.num_domains()));
        for (int m = 0; m < cfg.num_domains(); ++m) {
            const Eigen::Index N = cfg.tokens_per_domain(), Dm = cfg.token_dim(m);
            switch (req.roles[size_t(m)]) {
                case Role::G: {
                    Mat<T> noise(N, Dm);
                    for (Eigen::Index i = 0; i < noise.size(); ++i)
                        noise.data()[i] = T(rng.normal());
                    in.y[size_t(m)] = std::move(noise);
                    break;
                }
                case Role::C: {
                    require(size_t(m) < req.conditions.size() &&
                                req.conditions[size_t(m)].rows() == N &&
                                req.conditions[size_t(m)].cols() == Dm,
                            "integrate_flow: missing or misshaped condition tokens");
                    in.y[size_t(m)] = req.conditions[size_t(m)];
                    break;
                }
                case Role::X:
                    in.y[size_t(m)] = Mat<T>::Zero(N, Dm);
                    break;
            }
        }
    }

    const T dt = T(1) / T(ss.steps);
    const bool guided = ss.cfg_enabled && ss.cfg_scale != 1.0;

    auto velocity = [&](const std::vector<ForwardInput<T>>& at)
        -> std::vector<std::vector<Mat<T>>> {
        auto v = model.forward(at);
        if (!guided) return v;
        std::vector<ForwardInput<T>> null_in = at;
        for (auto& in : null_in) in.descriptor = cfg.null_descriptor();
        const auto v_null = model.forward(null_in);
        for (size_t s = 0; s < v.size(); ++s)
            for (size_t m = 0; m < v[s].size(); ++m)
                v[s][m] = cfg_velocity(v[s][m], v_null[s][m], T(ss.cfg_scale));
        return v;
    };

    for (int k = 0; k < ss.steps; ++k) {
        const T t = T(1) - T(k) * dt;
        for (auto& in : state) in.t = t;
        auto v = velocity(state);

        if (ss.integrator == Integrator::Midpoint) {
            // half step, re-evaluate, full step with the midpoint field
            std::vector<ForwardInput<T>> mid = state;
            const T t_mid = std::max(T(0), t - dt / 2);
            for (int s = 0; s < S; ++s) {
                mid[size_t(s)].t = t_mid;
                for (int m = 0; m < cfg.num_domains(); ++m)
                    if (state[size_t(s)].roles[size_t(m)] == Role::G)
                        mid[size_t(s)].y[size_t(m)] -= (dt / 2) * v[size_t(s)][size_t(m)];
            }
            v = velocity(mid);
        }

        for (int s = 0; s < S; ++s)
            for (int m = 0; m < cfg.num_domains(); ++m)
                if (state[size_t(s)].roles[size_t(m)] == Role::G)
                    state[size_t(s)].y[size_t(m)] -= dt * v[size_t(s)][size_t(m)];
    }

    std::vector<std::vector<Mat<T>>> out;
    out.resize(size_t(S));
    for (int s = 0; s < S; ++s) {
        out[size_t(s)].resize(size_t(cfg.num_domains()));
        for (int m = 0; m < cfg.num_domains(); ++m)
            if (state[size_t(s)].roles[size_t(m)] == Role::G)
                out[size_t(s)][size_t(m)] = std::move(state[size_t(s)].y[size_t(m)]);
    }
    return out;
}

// Snaps every pixel of a palette-domain grid to its nearest anchor.
inline GridF snap_to_palette(const GridF& g, const std::vector<Color3>& palette) {
    require(g.c == 3, "snap_to_palette: grid must have 3 channels");
    GridF out(g.h, g.w, 3);
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x) {
            int best = 0;
            float best_d = std::numeric_limits<float>::max();
            for (size_t a = 0; a < palette.size(); ++a) {
                const float dr = palette[a].r - g.at(y, x, 0);
                const float dg = palette[a].g - g.at(y, x, 1);
                const float db = palette[a].b - g.at(y, x, 2);
                const float d2 = dr * dr + dg * dg + db * db;
                if (d2 < best_d) {
                    best_d = d2;
                    best = int(a);
                }
            }
            out.at(y, x, 0) = palette[size_t(best)].r;
            out.at(y, x, 1) = palette[size_t(best)].g;
            out.at(y, x, 2) = palette[size_t(best)].b;
        }
    return out;
}

struct RunModeResult {
    std::vector<std::vector<GridF>> grids;  // per request, per domain (G only)
    RoleVector roles;
    SamplerSettings settings;
};

// High-level entry: builds roles from the task mode, encodes conditions,
// integrates, decodes G domains back to pixel grids (clamped; palette
// domains snapped to their anchors).
template <typename T>
RunModeResult run_mode(const Model<T>& model, SampleMode mode,
                       const std::vector<DomainSpec>& domains,
                       const std::vector<std::vector<GridF>>& condition_grids,
                       const std::vector<int>& descriptors, Rng& rng,
                       SamplerSettings settings_in = {}, int settings_overridden = 0) {
    const ModelConfig& cfg = model.cfg;
    require(int(domains.size()) == cfg.num_domains(), "run_mode: domain list mismatch");
    const int S = int(descriptors.size());
    require(S >= 1, "run_mode: need at least one request");
    require(condition_grids.empty() || int(condition_grids.size()) == S,
            "run_mode: condition batch size mismatch");

    SamplerSettings ss = settings_in;
    // mode defaults unless explicitly overridden: 20 steps + cfg 4.5 for the
    // generation modes, 10 steps + no cfg for perception
    if (!(settings_overridden & 1)) ss.steps = mode == SampleMode::Perceive ? 10 : 20;
    if (!(settings_overridden & 2)) {
        ss.cfg_scale = 4.5;
        ss.cfg_enabled = mode != SampleMode::Perceive;
    }
    if (mode == SampleMode::Perceive) ss.cfg_enabled = false;

    std::vector<SampleRequest<T>> reqs;
    reqs.resize(size_t(S));
    for (int s = 0; s < S; ++s) {
        auto& req = reqs[size_t(s)];
        req.roles.assign(size_t(cfg.num_domains()), Role::G);
        req.conditions.resize(size_t(cfg.num_domains()));
        const auto* conds = condition_grids.empty() ? nullptr : &condition_grids[size_t(s)];

        switch (mode) {
            case SampleMode::Joint:
                req.descriptor = descriptors[size_t(s)];
                break;
            case SampleMode::Controllable: {
                req.descriptor = descriptors[size_t(s)];
                require(conds != nullptr, "controllable mode needs condition grids");
                req.roles[0] = Role::G;
                int n_c = 0;
                for (int m = 1; m < cfg.num_domains(); ++m) {
                    const auto& g = (*conds)[size_t(m)];
                    if (g.numel() == 0) {
                        req.roles[size_t(m)] = Role::X;
                        continue;
                    }
                    req.roles[size_t(m)] = Role::C;
                    req.conditions[size_t(m)] =
                        encode(g, cfg.patch, m).tok.template cast<T>();
                    ++n_c;
                }
                require(n_c >= 1, "controllable mode needs a nonempty condition set");
                break;
            }
            case SampleMode::Perceive: {
                // descriptor forced to null: labels are independent of it
                // given the image
                req.descriptor = cfg.null_descriptor();
                require(conds != nullptr && (*conds)[0].numel() > 0,
                        "perceive mode needs an input image");
                req.roles[0] = Role::C;
                req.conditions[0] = encode((*conds)[0], cfg.patch, 0).tok.template cast<T>();
                break;
            }
        }
    }

    const auto token_out = integrate_flow(model, reqs, ss, rng);

    RunModeResult result;
    result.roles = reqs[0].roles;
    result.settings = ss;
    result.grids.resize(size_t(S));
    for (int s = 0; s < S; ++s) {
        result.grids[size_t(s)].resize(size_t(cfg.num_domains()));
        for (int m = 0; m < cfg.num_domains(); ++m) {
            if (reqs[size_t(s)].roles[size_t(m)] != Role::G) continue;
            TokenField<T> tf;
            tf.domain = m;
            tf.h = cfg.grid_h;
            tf.w = cfg.grid_w;
            tf.f = cfg.patch;
            tf.channels = cfg.channels[size_t(m)];
            tf.tok = token_out[size_t(s)][size_t(m)];
            Grid<T> g = decode(tf);
            GridF out(g.h, g.w, g.c);
            for (size_t i = 0; i < g.v.size(); ++i) out.v[i] = clamp_unit(float(g.v[i]));
            if (domains[size_t(m)].kind == DomainKind::Palette)
                out = snap_to_palette(out, domains[size_t(m)].palette);
            result.grids[size_t(s)][size_t(m)] = std::move(out);
        }
    }
    return result;
}

}  // namespace mdflow
