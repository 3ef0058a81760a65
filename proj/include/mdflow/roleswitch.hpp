#pragma once

#include "mdflow/common.hpp"
#include "mdflow/rng.hpp"

#include <string>
#include <vector>

namespace mdflow {

// Per-domain training/inference role: generate (noised target), condition
// (kept clean), or ignored (zeroed and masked out of attention).
enum class Role : uint8_t { G = 0, C = 1, X = 2 };

using RoleVector = std::vector<Role>;

inline char role_char(Role r) { return r == Role::G ? 'G' : (r == Role::C ? 'C' : 'X'); }

inline std::string format_roles(const RoleVector& roles) {
    std::string s;
    for (Role r : roles) s += role_char(r);
    return s;
}

inline RoleVector parse_roles(const std::string& s) {
    RoleVector roles;
    for (char c : s) {
        switch (c) {
            case 'G': case 'g': roles.push_back(Role::G); break;
            case 'C': case 'c': roles.push_back(Role::C); break;
            case 'X': case 'x': roles.push_back(Role::X); break;
            default: throw ConfigError(std::string("invalid role character: ") + c);
        }
    }
    require(!roles.empty(), "empty role string");
    return roles;
}

inline bool has_generate_role(const RoleVector& roles) {
    for (Role r : roles)
        if (r == Role::G) return true;
    return false;
}

// Mixture over the named role patterns used during training. "random" draws
// i.i.d. per-domain roles and resamples until at least one domain is G.
struct TaskMix {
    double joint = 0.3;
    double controllable = 0.3;
    double perception = 0.3;
    double random = 0.1;
    double p_g = 0.4, p_c = 0.4, p_x = 0.2;

    void validate() const {
        require(joint >= 0 && controllable >= 0 && perception >= 0 && random >= 0,
                "task mix weights must be nonnegative");
        const double s = joint + controllable + perception + random;
        require(std::abs(s - 1.0) < 1e-9, "task mix weights must sum to 1");
        require(p_g > 0, "random-pattern p_g must be positive");
        require(std::abs(p_g + p_c + p_x - 1.0) < 1e-9, "random-pattern probs must sum to 1");
    }
};

enum class RolePattern : uint8_t { Joint = 0, Controllable = 1, Perception = 2, Random = 3 };

inline const char* pattern_name(RolePattern p) {
    switch (p) {
        case RolePattern::Joint: return "joint";
        case RolePattern::Controllable: return "controllable";
        case RolePattern::Perception: return "perception";
        default: return "random";
    }
}

// Draws one role vector for M label domains (+ the image at index 0).
// Every returned vector has at least one G entry.
inline RoleVector sample_roles(int num_label_domains, Rng& rng, const TaskMix& mix,
                               RolePattern* pattern_out = nullptr) {
    require(num_label_domains >= 1, "need at least one label domain");
    mix.validate();
    const int total = num_label_domains + 1;
    RoleVector roles(size_t(total), Role::G);

    const double u = rng.uniform();
    RolePattern pattern;
    if (u < mix.joint)
        pattern = RolePattern::Joint;
    else if (u < mix.joint + mix.controllable)
        pattern = RolePattern::Controllable;
    else if (u < mix.joint + mix.controllable + mix.perception)
        pattern = RolePattern::Perception;
    else
        pattern = RolePattern::Random;
    if (pattern_out) *pattern_out = pattern;

    switch (pattern) {
        case RolePattern::Joint:
            break;  // all G
        case RolePattern::Controllable: {
            // image generated, a uniformly drawn nonempty label subset conditions,
            // the remaining labels are ignored
            roles[0] = Role::G;
            const uint64_t subsets = (uint64_t(1) << num_label_domains) - 1;
            const uint64_t pick = 1 + rng.below(subsets);
            for (int m = 0; m < num_label_domains; ++m)
                roles[size_t(m + 1)] = (pick >> m) & 1 ? Role::C : Role::X;
            break;
        }
        case RolePattern::Perception:
            roles[0] = Role::C;  // labels stay G
            break;
        case RolePattern::Random: {
            bool any_g = false;
            do {
                any_g = false;
                for (int m = 0; m < total; ++m) {
                    const double r = rng.uniform();
                    roles[size_t(m)] =
                        r < mix.p_g ? Role::G : (r < mix.p_g + mix.p_c ? Role::C : Role::X);
                    any_g |= roles[size_t(m)] == Role::G;
                }
            } while (!any_g);
            break;
        }
    }
    return roles;
}

// Eq-style switch: G tokens interpolate toward noise, C tokens pass through
// unchanged, X tokens become exactly zero. t=0 and t=1 reproduce y0 and eps
// bitwise for G.
template <typename T>
Mat<T> switch_tokens(const Mat<T>& y0, Role role, T t, const Mat<T>* eps) {
    switch (role) {
        case Role::C:
            return y0;
        case Role::X:
            return Mat<T>::Zero(y0.rows(), y0.cols());
        case Role::G: {
            require(eps != nullptr, "switch: missing noise for a G-role domain");
            require(eps->rows() == y0.rows() && eps->cols() == y0.cols(),
                    "switch: noise shape does not match tokens");
            return (T(1) - t) * y0 + t * (*eps);
        }
    }
    return y0;  // unreachable
}

template <typename T>
Mat<T> switch_tokens(const Mat<T>& y0, Role role, T t) {
    return switch_tokens<T>(y0, role, t, nullptr);
}

// Binary keep-mask over the flattened (M+1)*N token sequence: X-role domains
// contribute zeros, everything else ones.
inline std::vector<uint8_t> keep_mask(const RoleVector& roles, int tokens_per_domain) {
    std::vector<uint8_t> m(roles.size() * size_t(tokens_per_domain), 1);
    for (size_t d = 0; d < roles.size(); ++d)
        if (roles[d] == Role::X)
            std::fill(m.begin() + long(d) * tokens_per_domain,
                      m.begin() + long(d + 1) * tokens_per_domain, uint8_t(0));
    return m;
}

}  // namespace mdflow
