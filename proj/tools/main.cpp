// mdflow command-line interface: dataset generation, training, sampling,
// evaluation, attention benchmarking and self-checks in one binary.

#include "mdflow/bench.hpp"
#include "mdflow/checkpoint.hpp"
#include "mdflow/config.hpp"
#include "mdflow/eval.hpp"
#include "mdflow/evalrun.hpp"
#include "mdflow/sampler.hpp"
#include "mdflow/synthdata.hpp"
#include "mdflow/train.hpp"

#include <CLI11.hpp>

#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

using namespace mdflow;

namespace {

// Large Eigen temporaries churn every step; keeping them on the heap instead
// of fresh mmaps avoids page-fault overhead in the training loop.
void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

int run_gen_data(uint64_t n, uint64_t seed, const std::string& out,
                 const std::string& domain_csv, int size, int max_shapes) {
    const auto domains = domains_by_names(split_csv(domain_csv));
    const auto m = make_dataset(n, seed, domains, size, size, max_shapes, out);
    std::printf("wrote %llu samples (%dx%d, %zu domains) to %s\n",
                (unsigned long long)m.count, m.height, m.width, m.domains.size(), out.c_str());

    // a few preview images for eyeballing
    if (m.count > 0) {
        DatasetReader reader(out);
        const Sample s = reader.load(0);
        for (size_t d = 0; d < m.domains.size(); ++d)
            write_grid_ppm(out + "/preview_" + m.domains[d].name + ".ppm", s.grids[d]);
    }
    return 0;
}

int run_train(PipelineConfig pc, const std::string& out_dir, const std::string& resume,
              bool deterministic) {
    require(!pc.data_path.empty(), "train: --data (or data= in the config) is required");
    if (deterministic) pc.workers = 1;
    DatasetReader data(pc.data_path);
    const ModelConfig mc = pc.model_config(data.manifest());
    const TrainConfig tc = pc.train_config();

    ensure_dir(out_dir);
    pc.write_ini(out_dir + "/effective.ini");

    std::optional<Checkpoint<float>> from;
    if (!resume.empty()) from = load_checkpoint<float>(resume);

    const auto t0 = std::chrono::steady_clock::now();
    auto progress = [&](uint64_t step, double loss) {
        if (step % tc.log_every != 0) return;
        const double el =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("step %llu/%llu  loss %.5f  (%.0f s elapsed)\n", (unsigned long long)step,
                    (unsigned long long)tc.steps, loss, el);
        std::fflush(stdout);
    };
    train_loop<float>(mc, tc, data, out_dir, from ? &*from : nullptr, progress);
    std::printf("done: %s/ckpt_last.bin\n", out_dir.c_str());
    return 0;
}

int run_sample(const std::string& ckpt_path, const std::string& mode_str,
               const std::string& roles_str, const std::vector<std::string>& cond_args,
               int steps, double cfg_scale, bool cfg_given, uint64_t seed, int n_ensemble,
               const std::string& out_dir, bool midpoint) {
    const auto ck = load_checkpoint<float>(ckpt_path);
    Model<float> model;
    model.cfg = ck.config;
    model.params = ck.params;
    model.rebuild_pe();

    const SampleMode mode = parse_mode(mode_str);
    // the shipped analytic extractors define the label domain lineup
    require(model.cfg.num_domains() == 4,
            "sample: this CLI expects the image+edge+depthlike+segmentation dataset");
    const auto domains = domains_by_names({"image", "edge", "depthlike", "segmentation"});

    if (mode == SampleMode::Perceive && cfg_given)
        std::fprintf(stderr, "warning: --cfg is ignored in perceive mode (null text input)\n");

    SamplerSettings ss;
    int overridden = 0;
    if (steps > 0) {
        ss.steps = steps;
        overridden |= 1;
    }
    if (cfg_given) {
        ss.cfg_scale = cfg_scale;
        ss.cfg_enabled = cfg_scale != 1.0;
        overridden |= 2;
    }
    if (midpoint) ss.integrator = Integrator::Midpoint;

    if (!roles_str.empty()) {
        const RoleVector roles = parse_roles(roles_str);
        require(int(roles.size()) == model.cfg.num_domains(),
                "sample: role string length must be M+1");
        require(has_generate_role(roles), "sample: role string needs at least one G");
    }

    // conditions: domain=path.ppm
    std::vector<std::vector<GridF>> conds(1);
    conds[0].resize(domains.size());
    for (const auto& arg : cond_args) {
        const auto eq = arg.find('=');
        require(eq != std::string::npos, "sample: --cond expects domain=path");
        const std::string dn = arg.substr(0, eq), path = arg.substr(eq + 1);
        int idx = -1;
        for (const auto& d : domains)
            if (d.name == dn) idx = d.id;
        require(idx >= 0, "sample: unknown domain name: " + dn);
        conds[0][size_t(idx)] = read_ppm(path, domains[size_t(idx)].channels);
    }
    const bool any_cond = [&] {
        for (const auto& g : conds[0])
            if (g.numel()) return true;
        return false;
    }();
    if (!any_cond) conds.clear();

    std::vector<int> descs{0};

    ensure_dir(out_dir);
    Rng rng = Rng(0x5a3eULL).fork(seed);

    std::vector<RunModeResult> passes;
    for (int e = 0; e < std::max(1, n_ensemble); ++e)
        passes.push_back(run_mode(model, mode, domains, conds, descs, rng, ss, overridden));

    RunModeResult& first = passes[0];
    for (int m = 0; m < model.cfg.num_domains(); ++m) {
        if (first.grids[0][size_t(m)].numel() == 0) continue;
        GridF out = first.grids[0][size_t(m)];
        if (passes.size() > 1) {
            std::vector<GridF> votes;
            for (auto& p : passes) votes.push_back(p.grids[0][size_t(m)]);
            out = ensemble(votes, domains[size_t(m)]);
        }
        write_grid_ppm(out_dir + "/" + domains[size_t(m)].name + ".ppm", out);
    }

    std::ofstream mf(out_dir + "/manifest.txt");
    mf << "mode: " << mode_str << "\n";
    mf << "roles: " << format_roles(first.roles) << "\n";
    mf << "seed: " << seed << "\n";
    mf << "steps: " << first.settings.steps << "\n";
    mf << "cfg_scale: " << (first.settings.cfg_enabled ? first.settings.cfg_scale : 1.0) << "\n";
    mf << "ensemble: " << std::max(1, n_ensemble) << "\n";
    std::printf("wrote samples to %s\n", out_dir.c_str());
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& tasks_csv, const std::string& out_csv, uint64_t n,
             uint64_t seed) {
    const auto ck = load_checkpoint<float>(ckpt_path);
    Model<float> model;
    model.cfg = ck.config;
    model.params = ck.params;
    model.rebuild_pe();

    DatasetReader data(data_dir);
    EvalOptions opt;
    opt.n = std::min<uint64_t>(n, data.size());
    opt.seed = seed;
    const auto tasks = split_csv(tasks_csv);
    auto has = [&](const char* t) {
        for (const auto& x : tasks)
            if (x == t) return true;
        return false;
    };
    opt.perception = has("perception");
    opt.controllable = has("controllable");
    opt.joint = has("joint");
    opt.run_ensemble = has("ensemble");
    require(opt.perception || opt.controllable || opt.joint || opt.run_ensemble,
            "eval: no known task in --tasks (perception,controllable,joint,ensemble)");

    const auto rep = evaluate_model(model, data, opt);
    write_eval_csv(out_csv, rep.rows);
    for (const auto& r : rep.rows)
        std::printf("%-13s %-13s %-28s %.6f\n", r.task.c_str(), r.domain.c_str(),
                    r.metric.c_str(), r.value);
    std::printf("report: %s\n", out_csv.c_str());
    return 0;
}

int run_bench(const std::string& variants_csv, const std::string& m_csv, int n, int d, int heads,
              int repeats, const std::string& out_csv) {
    std::vector<int> m_list;
    for (const auto& tok : split_csv(m_csv)) m_list.push_back(std::stoi(tok));
    std::vector<BenchRow> rows;
    for (const auto& v : split_csv(variants_csv)) {
        AttnVariant var;
        if (v == "linear")
            var = AttnVariant::Linear;
        else if (v == "dense")
            var = AttnVariant::Dense;
        else
            throw ConfigError("unknown variant: " + v);
        auto r = bench_attention(var, m_list, n, d, heads, repeats);
        for (auto& row : r) {
            if (row.cv > 0.2)
                std::fprintf(stderr, "warning: %s M=%d timing cv %.2f exceeds 0.2\n",
                             variant_name(row.variant), row.domains, row.cv);
            rows.push_back(row);
        }
    }
    if (!out_csv.empty()) write_bench_csv(out_csv, rows);
    std::printf("%-8s %4s %6s %4s %3s %12s %12s\n", "variant", "M", "N", "d", "H", "median_us",
                "peak_kB");
    for (const auto& r : rows)
        std::printf("%-8s %4d %6d %4d %3d %12.1f %12zu\n", variant_name(r.variant), r.domains,
                    r.tokens_per_domain, r.head_dim, r.heads, r.median_ns / 1e3,
                    r.peak_bytes / 1024);
    for (const auto& v : split_csv(variants_csv)) {
        std::vector<BenchRow> vr;
        for (const auto& r : rows)
            if (std::string(variant_name(r.variant)) == v) vr.push_back(r);
        if (vr.size() >= 4)
            std::printf("%s log-log slope: %.3f\n", v.c_str(), fit_scaling_exponent(vr));
    }
    return 0;
}

int run_check(const std::string& level) {
    require(level == "fast" || level == "full", "check: --level must be fast or full");
    const bool full = level == "full";
    int failures = 0;
    auto report = [&](const char* name, bool ok, const std::string& detail = "") {
        std::printf("[%s] %s%s%s\n", ok ? "PASS" : "FAIL", name, detail.empty() ? "" : ": ",
                    detail.c_str());
        failures += !ok;
    };

    ModelConfig tiny;
    tiny.label_domains = 2;
    tiny.grid_h = tiny.grid_w = 4;
    tiny.patch = 2;
    tiny.channels = {3, 1, 3};
    tiny.width = 16;
    tiny.depth = 2;
    tiny.heads = 2;
    tiny.ffn_dim = 24;
    tiny.descriptor_vocab = 9;

    {  // oracle equivalence
        Rng rng(11);
        double worst = 0;
        const int cases = full ? 200 : 40;
        for (int c = 0; c < cases; ++c) {
            const int doms = 1 << rng.below(3);
            const int n = doms * int(4 << 2 * rng.below(3));
            const int d = rng.below(2) ? 4 : 16;
            AttentionBatch<double> b;
            b.q.resize(n, d);
            b.k.resize(n, d);
            b.v.resize(n, d);
            for (Eigen::Index i = 0; i < b.q.size(); ++i) {
                b.q.data()[i] = rng.normal();
                b.k.data()[i] = rng.normal();
                b.v.data()[i] = rng.normal();
            }
            b.mask.assign(size_t(n), 1);
            for (auto& mk : b.mask) mk = rng.uniform() < 0.2 ? 0 : 1;
            b.heads = 1;
            const Mat<double> fast = masked_linear_attention(b, 1e-8);
            const Mat<double> ref = masked_attention_oracle(b, 1e-8);
            for (Eigen::Index i = 0; i < fast.size(); ++i) {
                const double x = fast.data()[i], y = ref.data()[i];
                worst =
                    std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
            }
        }
        std::ostringstream os;
        os << "max rel diff " << worst << " over " << cases << " cases";
        report("attention oracle equivalence", worst < 1e-10, os.str());
    }

    {  // gradient check
        const auto rep = grad_check(tiny, 3, full ? 400 : 200);
        std::ostringstream os;
        os << "max rel err " << rep.max_rel_err << " (" << rep.checked << " params)";
        report("finite-difference gradient check", rep.max_rel_err < 1e-4, os.str());
    }

    {  // PE equality across recomputation + layout
        const auto pe1 = sinusoidal_pe<float>(8, 8, 64);
        const auto pe2 = sinusoidal_pe<float>(8, 8, 64);
        bool ok = (pe1.array() == pe2.array()).all();
        for (int k = 0; k < 16; ++k)
            ok = ok && pe1(0, 4 * k) == 0.0f && pe1(0, 4 * k + 1) == 1.0f;
        report("positional embedding domain invariance", ok);
    }

    {  // CFG identity
        Rng rng(5);
        Mat<float> a(8, 8), b(8, 8);
        for (Eigen::Index i = 0; i < a.size(); ++i) {
            a.data()[i] = float(rng.normal());
            b.data()[i] = float(rng.normal());
        }
        const bool ok = (cfg_velocity(a, b, 1.0f).array() == a.array()).all() &&
                        (cfg_velocity(a, b, 0.0f).array() == b.array()).all();
        report("cfg identities at scale 0 and 1", ok);
    }

    {  // determinism replay at smoke scale
        TrainConfig tc;
        tc.workers = 1;
        tc.steps = full ? 8 : 4;
        tc.batch = 2;
        tc.checkpoint_every = tc.steps / 2;
        tc.log_every = tc.steps;
        tc.seed = 3;

        namespace fs = std::filesystem;
        const auto base = fs::temp_directory_path() / "mdflow_check";
        fs::remove_all(base);
        const auto data_dir = (base / "data").string();
        make_dataset(8, 2, domains_by_names({"image", "edge", "segmentation"}), 8, 8, 3,
                     data_dir);
        DatasetReader reader(data_dir);
        const auto full_dir = (base / "full").string();
        train_loop<float>(tiny, tc, reader, full_dir);
        const auto half_dir = (base / "half").string();
        TrainConfig tc_half = tc;
        tc_half.steps = tc.steps / 2;
        train_loop<float>(tiny, tc_half, reader, half_dir);
        const auto mid = load_checkpoint<float>(half_dir + "/ckpt_step" +
                                                std::to_string(tc.steps / 2) + ".bin");
        train_loop<float>(tiny, tc, reader, half_dir, &mid);
        auto slurp = [](const std::string& p) {
            std::ifstream f(p, std::ios::binary);
            return std::string(std::istreambuf_iterator<char>(f), {});
        };
        const std::string tail = "/ckpt_step" + std::to_string(tc.steps) + ".bin";
        report("determinism replay (resume == uninterrupted)",
               slurp(full_dir + tail) == slurp(half_dir + tail));
        fs::remove_all(base);
    }

    return failures ? 3 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();

    // a --config file supplies train defaults; explicit flags override it,
    // so the file is loaded before CLI11 parses
    PipelineConfig pc;
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") {
            try {
                pc.load_ini(argv[i + 1]);
            } catch (const std::exception& e) {
                std::fprintf(stderr, "error: %s\n", e.what());
                return 2;
            }
        }

    CLI::App app{"multi-domain joint diffusion at desk scale"};
    app.require_subcommand(1);
    bool deterministic = false;
    app.add_flag("--deterministic", deterministic,
                 "single-worker mode with fixed reduction order");

    auto* gen = app.add_subcommand("gen-data", "generate a procedural dataset");
    uint64_t gd_n = 1000, gd_seed = 1;
    std::string gd_out, gd_domains = "image,edge,depthlike,segmentation";
    int gd_size = 32, gd_max_shapes = 3;
    gen->add_option("--n", gd_n, "number of samples");
    gen->add_option("--seed", gd_seed, "generation seed");
    gen->add_option("--out", gd_out, "output directory")->required();
    gen->add_option("--domains", gd_domains, "comma-separated domain names");
    gen->add_option("--size", gd_size, "canvas size (H = W)");
    gen->add_option("--max-shapes", gd_max_shapes, "maximum shapes per scene");

    auto* tr = app.add_subcommand("train", "train a model");
    std::string tr_config, tr_out, tr_resume;
    tr->add_option("--config", tr_config, "INI config file (loaded as defaults)");
    tr->add_option("--data", pc.data_path, "dataset directory");
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");
    tr->add_option("--steps", pc.steps, "total optimizer steps");
    tr->add_option("--batch", pc.batch, "batch size");
    tr->add_option("--lr", pc.lr, "learning rate");
    tr->add_option("--warmup-steps", pc.warmup_steps, "linear warmup steps");
    tr->add_option("--width", pc.width, "model width D");
    tr->add_option("--depth", pc.depth, "transformer blocks L");
    tr->add_option("--heads", pc.heads, "attention heads H");
    tr->add_option("--ffn-dim", pc.ffn_dim, "gated FFN hidden dim");
    tr->add_option("--patch", pc.patch, "patch factor f");
    tr->add_option("--eps-den", pc.eps_den, "attention denominator stabilizer");
    tr->add_option("--seed", pc.seed, "training seed");
    tr->add_option("--workers", pc.workers, "gradient worker threads");
    tr->add_option("--checkpoint-every", pc.checkpoint_every, "checkpoint interval");
    tr->add_option("--log-every", pc.log_every, "loss log interval");
    tr->add_option("--desc-dropout", pc.desc_dropout, "descriptor dropout probability");
    tr->add_option("--mix-joint", pc.mix_joint, "task mix weight: joint");
    tr->add_option("--mix-controllable", pc.mix_controllable, "task mix weight: controllable");
    tr->add_option("--mix-perception", pc.mix_perception, "task mix weight: perception");
    tr->add_option("--mix-random", pc.mix_random, "task mix weight: random");
    tr->add_option("--grad-clip", pc.grad_clip, "gradient norm clip");
    tr->add_option("--adam-eps", pc.adam_eps, "Adam epsilon");
    tr->add_option("--beta1", pc.beta1, "Adam beta1");
    tr->add_option("--beta2", pc.beta2, "Adam beta2");

    auto* sa = app.add_subcommand("sample", "sample in one of the three task modes");
    std::string sa_mode, sa_ckpt, sa_roles, sa_out = "samples";
    std::vector<std::string> sa_conds;
    int sa_steps = 0, sa_ens = 1;
    double sa_cfg = 4.5;
    uint64_t sa_seed = 0;
    bool sa_mid = false;
    sa->add_option("--mode", sa_mode, "joint | controllable | perceive")->required();
    sa->add_option("--checkpoint", sa_ckpt, "model checkpoint")->required();
    sa->add_option("--roles", sa_roles, "explicit role string, e.g. GCXG (validated)");
    sa->add_option("--cond", sa_conds, "conditioning inputs: domain=path.ppm");
    sa->add_option("--steps", sa_steps, "integration steps (0 = mode default)");
    auto* cfg_opt = sa->add_option("--cfg", sa_cfg, "classifier-free guidance scale");
    sa->add_option("--seed", sa_seed, "sampling seed");
    sa->add_option("--ensemble", sa_ens, "number of averaged samples");
    sa->add_option("--out", sa_out, "output directory");
    sa->add_flag("--midpoint", sa_mid, "midpoint integrator instead of Euler");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
    std::string ev_ckpt, ev_data, ev_tasks = "perception,controllable,joint,ensemble";
    std::string ev_csv = "eval.csv";
    uint64_t ev_n = 200, ev_seed = 2026;
    ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
    ev->add_option("--data", ev_data, "held-out dataset directory")->required();
    ev->add_option("--tasks", ev_tasks, "comma list of perception,controllable,joint,ensemble");
    ev->add_option("--out-csv", ev_csv, "report path");
    ev->add_option("--n", ev_n, "held-out samples to use");
    ev->add_option("--seed", ev_seed, "sampling seed");

    auto* be = app.add_subcommand("bench-attn", "attention cost scaling benchmark");
    std::string be_variants = "linear,dense", be_m = "1,2,4,8", be_csv;
    int be_n = 64, be_d = 32, be_h = 4, be_rep = 11;
    be->add_option("--variants", be_variants, "linear,dense");
    be->add_option("--m-list", be_m, "domain counts");
    be->add_option("--n", be_n, "tokens per domain");
    be->add_option("--d", be_d, "head dimension");
    be->add_option("--heads", be_h, "heads");
    be->add_option("--repeats", be_rep, "timing repeats");
    be->add_option("--out-csv", be_csv, "CSV output path");

    auto* ch = app.add_subcommand("check", "run built-in self checks");
    std::string ch_level = "fast";
    ch->add_option("--level", ch_level, "fast | full");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }

    try {
        if (*gen) return run_gen_data(gd_n, gd_seed, gd_out, gd_domains, gd_size, gd_max_shapes);
        if (*tr) return run_train(pc, tr_out, tr_resume, deterministic);
        if (*sa)
            return run_sample(sa_ckpt, sa_mode, sa_roles, sa_conds, sa_steps, sa_cfg,
                              cfg_opt->count() > 0, sa_seed, sa_ens, sa_out, sa_mid);
        if (*ev) return run_eval(ev_ckpt, ev_data, ev_tasks, ev_csv, ev_n, ev_seed);
        if (*be) return run_bench(be_variants, be_m, be_n, be_d, be_h, be_rep, be_csv);
        if (*ch) return run_check(ch_level);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 1;
}
