#pragma once

#include "mdflow/eval.hpp"
#include "mdflow/sampler.hpp"
#include "mdflow/synthdata.hpp"

#include <string>
#include <vector>

namespace mdflow {

struct EvalOptions {
    uint64_t n = 200;           // held-out samples to evaluate
    uint64_t seed = 2026;       // sampling seed
    int ensemble_size = 5;
    int chunk = 16;             // requests per forward batch
    bool perception = true;
    bool controllable = true;
    bool joint = true;
    bool run_ensemble = true;
};

// Aggregate numbers consumed by the acceptance criteria; rows carry the same
// data for the CSV report.
struct EvalReport {
    double edge_mae = 0, edge_mae_baseline = 0;
    double depth_absrel = 0, depth_absrel_baseline = 0;
    double seg_miou = 0;
    double edge_mae_ensemble = 0, depth_absrel_ensemble = 0;
    double seg_miou_ensemble = 0;
    double control_reextract = 0, control_reextract_baseline = 0;
    double joint_consistency = 0;
    std::vector<EvalRow> rows;
};

namespace detail {

inline int domain_index(const std::vector<DomainSpec>& ds, const std::string& name) {
    for (const auto& d : ds)
        if (d.name == name) return d.id;
    return -1;
}

}  // namespace detail

// Runs the three task modes over `n` held-out samples and computes the
// paper-style metrics against the analytic ground truth.
template <typename T>
EvalReport evaluate_model(const Model<T>& model, DatasetReader& data, const EvalOptions& opt) {
    const auto& manifest = data.manifest();
    const auto& domains = manifest.domains;
    require(uint64_t(opt.n) <= data.size(), "evaluate_model: not enough held-out samples");
    require(opt.chunk >= 1 && opt.ensemble_size >= 1, "evaluate_model: bad options");

    const int edge_id = detail::domain_index(domains, "edge");
    const int depth_id = detail::domain_index(domains, "depthlike");
    const int seg_id = detail::domain_index(domains, "segmentation");

    std::vector<Sample> held;
    for (uint64_t i = 0; i < opt.n; ++i) held.push_back(data.load(i));

    EvalReport rep;
    Rng rng = Rng(0xeba1ULL).fork(opt.seed);

    auto chunked = [&](SampleMode mode, const std::vector<std::vector<GridF>>& conds,
                       const std::vector<int>& descs, Rng& r) {
        std::vector<std::vector<GridF>> out;
        for (size_t base = 0; base < descs.size(); base += size_t(opt.chunk)) {
            const size_t hi = std::min(descs.size(), base + size_t(opt.chunk));
            std::vector<std::vector<GridF>> c;
            if (!conds.empty()) c.assign(conds.begin() + long(base), conds.begin() + long(hi));
            const std::vector<int> d(descs.begin() + long(base), descs.begin() + long(hi));
            auto res = run_mode(model, mode, domains, c, d, r);
            for (auto& g : res.grids) out.push_back(std::move(g));
        }
        return out;
    };

    // ---- perception: image -> all labels -------------------------------
    std::vector<std::vector<GridF>> percept_single;
    if (opt.perception || opt.run_ensemble) {
        std::vector<std::vector<GridF>> conds(held.size());
        std::vector<int> descs(held.size(), 0);
        for (size_t i = 0; i < held.size(); ++i) {
            conds[i].resize(domains.size());
            conds[i][0] = held[i].grids[0];
        }
        percept_single = chunked(SampleMode::Perceive, conds, descs, rng);

        double edge_sum = 0, depth_sum = 0;
        SegConfusion seg_conf(domains.empty() ? 0 : seg_palette().size());
        for (size_t i = 0; i < held.size(); ++i) {
            if (edge_id > 0)
                edge_sum += mae(percept_single[i][size_t(edge_id)],
                                held[i].grids[size_t(edge_id)]);
            if (depth_id > 0)
                depth_sum += absrel(percept_single[i][size_t(depth_id)],
                                    held[i].grids[size_t(depth_id)]);
            if (seg_id > 0)
                seg_conf.add(percept_single[i][size_t(seg_id)], held[i].grids[size_t(seg_id)],
                             domains[size_t(seg_id)].palette);
        }
        rep.edge_mae = edge_sum / double(held.size());
        rep.depth_absrel = depth_sum / double(held.size());
        rep.seg_miou = seg_id > 0 ? seg_conf.scores().miou : 0;

        // mean-predictor baselines, computed once per dataset
        if (edge_id > 0) {
            std::vector<GridF> gts;
            for (auto& h : held) gts.push_back(h.grids[size_t(edge_id)]);
            const GridF mean = mean_grid(gts);
            double s = 0;
            for (auto& g : gts) s += mae(mean, g);
            rep.edge_mae_baseline = s / double(gts.size());
        }
        if (depth_id > 0) {
            std::vector<GridF> gts;
            for (auto& h : held) gts.push_back(h.grids[size_t(depth_id)]);
            const GridF mean = mean_grid(gts);
            double s = 0;
            for (auto& g : gts) s += absrel(mean, g);
            rep.depth_absrel_baseline = s / double(gts.size());
        }

        rep.rows.push_back({"perception", "edge", "mae", rep.edge_mae, opt.n, opt.seed});
        rep.rows.push_back(
            {"perception", "edge", "mae_mean_baseline", rep.edge_mae_baseline, opt.n, opt.seed});
        rep.rows.push_back(
            {"perception", "depthlike", "absrel", rep.depth_absrel, opt.n, opt.seed});
        rep.rows.push_back({"perception", "depthlike", "absrel_mean_baseline",
                            rep.depth_absrel_baseline, opt.n, opt.seed});
        rep.rows.push_back(
            {"perception", "segmentation", "miou", rep.seg_miou, opt.n, opt.seed});
    }

    // ---- perception ensemble -------------------------------------------
    if (opt.run_ensemble) {
        std::vector<std::vector<std::vector<GridF>>> passes;  // pass -> sample -> domain
        passes.push_back(percept_single);
        std::vector<std::vector<GridF>> conds(held.size());
        std::vector<int> descs(held.size(), 0);
        for (size_t i = 0; i < held.size(); ++i) {
            conds[i].resize(domains.size());
            conds[i][0] = held[i].grids[0];
        }
        for (int e = 1; e < opt.ensemble_size; ++e)
            passes.push_back(chunked(SampleMode::Perceive, conds, descs, rng));

        double edge_sum = 0, depth_sum = 0;
        SegConfusion seg_conf(seg_palette().size());
        for (size_t i = 0; i < held.size(); ++i) {
            for (int m = 1; m < int(domains.size()); ++m) {
                std::vector<GridF> votes;
                for (auto& p : passes) votes.push_back(p[i][size_t(m)]);
                const GridF ens = ensemble(votes, domains[size_t(m)]);
                if (m == edge_id) edge_sum += mae(ens, held[i].grids[size_t(m)]);
                if (m == depth_id) depth_sum += absrel(ens, held[i].grids[size_t(m)]);
                if (m == seg_id)
                    seg_conf.add(ens, held[i].grids[size_t(m)], domains[size_t(m)].palette);
            }
        }
        rep.edge_mae_ensemble = edge_sum / double(held.size());
        rep.depth_absrel_ensemble = depth_sum / double(held.size());
        rep.seg_miou_ensemble = seg_id > 0 ? seg_conf.scores().miou : 0;
        rep.rows.push_back(
            {"ensemble", "edge", "mae", rep.edge_mae_ensemble, opt.n, opt.seed});
        rep.rows.push_back(
            {"ensemble", "depthlike", "absrel", rep.depth_absrel_ensemble, opt.n, opt.seed});
        rep.rows.push_back(
            {"ensemble", "segmentation", "miou", rep.seg_miou_ensemble, opt.n, opt.seed});
    }

    // ---- controllable: edge -> image, vs unconditional baseline --------
    if (opt.controllable && edge_id > 0) {
        std::vector<std::vector<GridF>> conds(held.size());
        std::vector<int> descs(held.size());
        for (size_t i = 0; i < held.size(); ++i) {
            conds[i].resize(domains.size());
            conds[i][size_t(edge_id)] = held[i].grids[size_t(edge_id)];
            descs[i] = int(held[i].descriptor_id);
        }
        const auto gen = chunked(SampleMode::Controllable, conds, descs, rng);

        // unconditional arm: identical descriptors, no label conditioning
        const auto uncond = chunked(SampleMode::Joint, {}, descs, rng);

        double cond_sum = 0, uncond_sum = 0;
        for (size_t i = 0; i < held.size(); ++i) {
            const GridF& target_edge = held[i].grids[size_t(edge_id)];
            cond_sum +=
                mae(target_edge, reextract_edge(gen[i][0]));
            uncond_sum += mae(target_edge, reextract_edge(uncond[i][0]));
        }
        rep.control_reextract = cond_sum / double(held.size());
        rep.control_reextract_baseline = uncond_sum / double(held.size());
        rep.rows.push_back({"controllable", "edge", "reextract_mae", rep.control_reextract,
                            opt.n, opt.seed});
        rep.rows.push_back({"controllable", "edge", "reextract_mae_uncond_baseline",
                            rep.control_reextract_baseline, opt.n, opt.seed});
    }

    // ---- joint: generated image vs generated edge label ----------------
    if (opt.joint && edge_id > 0) {
        std::vector<int> descs(held.size());
        for (size_t i = 0; i < held.size(); ++i) descs[i] = int(held[i].descriptor_id);
        const auto gen = chunked(SampleMode::Joint, {}, descs, rng);
        double s = 0;
        for (size_t i = 0; i < held.size(); ++i)
            s += reextract_consistency(gen[i][0], gen[i][size_t(edge_id)],
                                       domains[size_t(edge_id)]);
        rep.joint_consistency = s / double(held.size());
        rep.rows.push_back(
            {"joint", "edge", "reextract_mae", rep.joint_consistency, opt.n, opt.seed});
    }

    return rep;
}

}  // namespace mdflow
