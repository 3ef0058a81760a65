#pragma once

#include "mdflow/checkpoint.hpp"
#include "mdflow/codec.hpp"
#include "mdflow/model.hpp"
#include "mdflow/rng.hpp"
#include "mdflow/roleswitch.hpp"
#include "mdflow/synthdata.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <functional>
#include <thread>
#include <vector>

namespace mdflow {

struct TrainConfig {
    uint64_t steps = 15000;
    int batch = 32;
    double lr = 4e-4;
    int warmup_steps = 500;
    double beta1 = 0.9, beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;       // global norm
    double desc_dropout = 0.1;    // descriptor replaced by the null row
    TaskMix task_mix;
    uint64_t seed = 0;
    int workers = 2;              // 1 == determinism mode
    uint64_t checkpoint_every = 1000;
    uint64_t log_every = 50;

    void validate() const {
        require(batch >= 1, "batch must be positive");
        require(lr >= 0, "learning rate must be nonnegative");
        require(workers >= 1, "workers must be positive");
        require(grad_clip > 0, "grad_clip must be positive");
        require(desc_dropout >= 0 && desc_dropout <= 1, "desc_dropout must be in [0,1]");
        task_mix.validate();
    }

    double lr_at(uint64_t step) const {
        if (warmup_steps <= 0 || step >= uint64_t(warmup_steps)) return lr;
        return lr * double(step + 1) / double(warmup_steps);
    }
};

// One fully materialized training example: switched inputs plus the
// velocity regression targets for its G domains.
template <typename T>
struct TrainExample {
    ForwardInput<T> input;
    std::vector<Mat<T>> target;  // per domain; empty for non-G domains
    RolePattern pattern = RolePattern::Joint;
};

// Tokenizes a raw sample, draws roles / t / noise from `rng` and applies the
// switch. All randomness is drawn here, in a fixed order, so training is
// reproducible regardless of the worker count.
template <typename T>
TrainExample<T> make_train_example(const ModelConfig& cfg, const TrainConfig& tc,
                                   const Sample& sample, Rng& rng) {
    TrainExample<T> ex;
    ex.input.roles = sample_roles(cfg.label_domains, rng, tc.task_mix, &ex.pattern);
    ex.input.t = T(rng.uniform());

    // perception batches always use the null descriptor; others drop it with
    // probability desc_dropout to support classifier-free guidance
    if (ex.pattern == RolePattern::Perception || rng.uniform() < tc.desc_dropout)
        ex.input.descriptor = cfg.null_descriptor();
    else
        ex.input.descriptor = int(sample.descriptor_id);

    ex.target.resize(size_t(cfg.num_domains()));
    for (int m = 0; m < cfg.num_domains(); ++m) {
        const Mat<T> y0 = encode(sample.grids[size_t(m)], cfg.patch, m).tok.template cast<T>();
        const Role role = ex.input.roles[size_t(m)];
        if (role == Role::G) {
            Mat<T> eps(y0.rows(), y0.cols());
            for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = T(rng.normal());
            ex.input.y.push_back(switch_tokens(y0, role, ex.input.t, &eps));
            ex.target[size_t(m)] = eps - y0;
        } else {
            ex.input.y.push_back(switch_tokens(y0, role, ex.input.t));
        }
    }
    return ex;
}

// Eq-style flow-matching loss: mean squared error of the predicted velocity
// against (eps - y0), averaged over every G-domain token element in the
// batch. C/X-domain predictions contribute exactly nothing.
template <typename T>
T flow_loss(const std::vector<std::vector<Mat<T>>>& outputs,
            const std::vector<TrainExample<T>>& examples,
            std::vector<std::vector<Mat<T>>>* d_out = nullptr) {
    require(outputs.size() == examples.size(), "flow_loss: batch size mismatch");
    size_t total = 0;
    for (const auto& ex : examples)
        for (size_t m = 0; m < ex.target.size(); ++m)
            if (ex.input.roles[m] == Role::G) total += size_t(ex.target[m].size());
    require(total > 0, "flow_loss: no G-domain elements in the batch");

    double sum = 0;
    if (d_out) d_out->assign(outputs.size(), {});
    for (size_t s = 0; s < outputs.size(); ++s) {
        const auto& ex = examples[s];
        if (d_out) (*d_out)[s].resize(ex.target.size());
        for (size_t m = 0; m < ex.target.size(); ++m) {
            const auto& o = outputs[s][m];
            if (ex.input.roles[m] != Role::G) {
                if (d_out) (*d_out)[s][m] = Mat<T>::Zero(o.rows(), o.cols());
                continue;
            }
            const Mat<T> diff = o - ex.target[m];
            sum += double(diff.array().square().sum());
            if (d_out) (*d_out)[s][m] = (T(2) / T(total)) * diff;
        }
    }
    return T(sum / double(total));
}

template <typename T>
struct TrainState {
    Model<T> model;
    Params<T> adam_m, adam_v;
    uint64_t step = 0;
    Rng rng;

    explicit TrainState(const ModelConfig& cfg, uint64_t seed)
        : model(cfg, seed), rng(Rng(0x7a11ULL).fork(seed)) {
        adam_m = zeros_like(model.params);
        adam_v = zeros_like(model.params);
    }

    explicit TrainState(const Checkpoint<T>& ck) : model(), rng(0) {
        model.cfg = ck.config;
        model.params = ck.params;
        model.rebuild_pe();
        adam_m = ck.has_optimizer ? ck.adam_m : zeros_like(model.params);
        adam_v = ck.has_optimizer ? ck.adam_v : zeros_like(model.params);
        step = ck.step;
        rng.set_state(ck.rng_state);
    }

    Checkpoint<T> to_checkpoint() const {
        Checkpoint<T> ck;
        ck.config = model.cfg;
        ck.step = step;
        ck.rng_state = rng.state();
        ck.params = model.params;
        ck.adam_m = adam_m;
        ck.adam_v = adam_v;
        ck.has_optimizer = true;
        return ck;
    }
};

// Gradients of one batch: forward + backward, chunked over `workers` threads
// with a fixed reduction order (contiguous chunks, summed worker-by-worker),
// so results depend on the worker count but not on scheduling.
template <typename T>
T batch_gradients(const Model<T>& model, const std::vector<TrainExample<T>>& examples,
                  int workers, Params<T>& grads) {
    const int S = int(examples.size());
    workers = std::min(workers, S);
    std::vector<Params<T>> worker_grads;
    std::vector<T> worker_loss_num(size_t(workers), T(0));
    for (int w = 0; w < workers; ++w) worker_grads.push_back(zeros_like(model.params));

    size_t total = 0;
    for (const auto& ex : examples)
        for (size_t m = 0; m < ex.target.size(); ++m)
            if (ex.input.roles[m] == Role::G) total += size_t(ex.target[m].size());
    require(total > 0, "batch_gradients: no G-domain elements");

    auto run_worker = [&](int w) {
        const int lo = w * S / workers, hi = (w + 1) * S / workers;
        if (lo >= hi) return;
        std::vector<ForwardInput<T>> inputs;
        std::vector<TrainExample<T> const*> exs;
        for (int s = lo; s < hi; ++s) {
            inputs.push_back(examples[size_t(s)].input);
            exs.push_back(&examples[size_t(s)]);
        }
        ChunkCache<T> cache;
        const auto out = model.forward(inputs, &cache);

        double sq = 0;
        std::vector<std::vector<Mat<T>>> d_out(out.size());
        for (size_t s = 0; s < out.size(); ++s) {
            d_out[s].resize(out[s].size());
            for (size_t m = 0; m < out[s].size(); ++m) {
                if (exs[s]->input.roles[m] != Role::G) {
                    d_out[s][m] = Mat<T>::Zero(out[s][m].rows(), out[s][m].cols());
                    continue;
                }
                const Mat<T> diff = out[s][m] - exs[s]->target[m];
                sq += double(diff.array().square().sum());
                d_out[s][m] = (T(2) / T(total)) * diff;
            }
        }
        worker_loss_num[size_t(w)] = T(sq);
        model.backward(inputs, cache, d_out, worker_grads[size_t(w)]);
    };

    if (workers == 1) {
        run_worker(0);
    } else {
        std::vector<std::thread> threads;
        for (int w = 0; w < workers; ++w) threads.emplace_back(run_worker, w);
        for (auto& t : threads) t.join();
    }

    // fixed-order reduction
    auto dst = tensor_refs(grads);
    for (int w = 0; w < workers; ++w) {
        auto src = tensor_refs(worker_grads[size_t(w)]);
        for (size_t i = 0; i < dst.size(); ++i) *dst[i].mat += *src[i].mat;
    }
    T loss = T(0);
    for (T l : worker_loss_num) loss += l;
    return T(double(loss) / double(total));
}

// Clips the global gradient norm and applies one Adam update.
template <typename T>
void adam_step(TrainState<T>& st, Params<T>& grads, const TrainConfig& tc) {
    auto g = tensor_refs(grads);
    double norm_sq = 0;
    for (auto& r : g) norm_sq += double(r.mat->template cast<double>().array().square().sum());
    const double norm = std::sqrt(norm_sq);
    const T scale = T(norm > tc.grad_clip ? tc.grad_clip / norm : 1.0);

    const double lr = tc.lr_at(st.step);
    const double b1 = tc.beta1, b2 = tc.beta2;
    const double bc1 = 1.0 - std::pow(b1, double(st.step + 1));
    const double bc2 = 1.0 - std::pow(b2, double(st.step + 1));

    auto p = tensor_refs(st.model.params);
    auto m = tensor_refs(st.adam_m);
    auto v = tensor_refs(st.adam_v);
    for (size_t i = 0; i < p.size(); ++i) {
        auto& gm = *g[i].mat;
        gm *= scale;
        *m[i].mat = T(b1) * *m[i].mat + T(1 - b1) * gm;
        v[i].mat->array() = T(b2) * v[i].mat->array() + T(1 - b2) * gm.array().square();
        p[i].mat->array() -= T(lr) * (m[i].mat->array() / T(bc1)) /
                             ((v[i].mat->array() / T(bc2)).sqrt() + T(tc.adam_eps));
    }
}

// One optimizer step on an already materialized batch. Aborts on non-finite
// loss with a diagnostic.
template <typename T>
T train_step(TrainState<T>& st, const std::vector<TrainExample<T>>& examples,
             const TrainConfig& tc) {
    Params<T> grads = zeros_like(st.model.params);
    const T loss = batch_gradients(st.model, examples, tc.workers, grads);
    if (!std::isfinite(double(loss)))
        throw std::runtime_error("non-finite loss at step " + std::to_string(st.step) +
                                 " (seed " + std::to_string(tc.seed) + ")");
    adam_step(st, grads, tc);
    st.step += 1;
    return loss;
}

// Draws a batch (indices, roles, t, noise) from the state rng and steps.
template <typename T>
T train_step_from_dataset(TrainState<T>& st, DatasetReader& data, const TrainConfig& tc,
                          RolePattern* first_pattern = nullptr) {
    std::vector<TrainExample<T>> examples;
    examples.reserve(size_t(tc.batch));
    for (int b = 0; b < tc.batch; ++b) {
        const uint64_t idx = st.rng.below(data.size());
        const Sample sample = data.load(idx);
        examples.push_back(make_train_example<T>(st.model.cfg, tc, sample, st.rng));
    }
    if (first_pattern) *first_pattern = examples[0].pattern;
    return train_step(st, examples, tc);
}

// Full training loop with CSV loss logging and periodic checkpointing.
// Resuming from any written checkpoint continues bitwise identically in
// determinism mode (workers = 1) and for any fixed worker count.
template <typename T>
TrainState<T> train_loop(const ModelConfig& mc, const TrainConfig& tc, DatasetReader& data,
                         const std::string& out_dir,
                         const Checkpoint<T>* resume_from = nullptr,
                         std::function<void(uint64_t, double)> progress = {}) {
    tc.validate();
    mc.validate();
    require(data.size() > 0, "train_loop: empty dataset");
    require(data.manifest().height == mc.grid_h * mc.patch &&
                data.manifest().width == mc.grid_w * mc.patch,
            "train_loop: dataset resolution does not match the model config");
    require(int(data.manifest().domains.size()) == mc.num_domains(),
            "train_loop: dataset domain count does not match the model config");
    for (int m = 0; m < mc.num_domains(); ++m)
        require(data.manifest().domains[size_t(m)].channels == mc.channels[size_t(m)],
                "train_loop: dataset channels do not match the model config");
    ensure_dir(out_dir);

    TrainState<T> st = resume_from ? TrainState<T>(*resume_from) : TrainState<T>(mc, tc.seed);

    const std::string log_path = out_dir + "/loss.csv";
    std::ofstream log;
    if (st.step == 0) {
        log.open(log_path);
        log << "step,loss,lr,role_pattern\n";
    } else {
        log.open(log_path, std::ios::app);
    }
    if (!log) throw IoError("cannot open loss log: " + log_path);

    while (st.step < tc.steps) {
        RolePattern pattern;
        const T loss = train_step_from_dataset(st, data, tc, &pattern);
        const uint64_t done = st.step;  // step counter after the update
        if (done % tc.log_every == 0 || done == tc.steps) {
            log << done << "," << double(loss) << "," << tc.lr_at(done - 1) << ","
                << pattern_name(pattern) << "\n";
            log.flush();
        }
        if (progress) progress(done, double(loss));
        if (done % tc.checkpoint_every == 0 || done == tc.steps) {
            save_checkpoint(out_dir + "/ckpt_step" + std::to_string(done) + ".bin",
                            st.to_checkpoint());
            save_checkpoint(out_dir + "/ckpt_last.bin", st.to_checkpoint());
        }
    }
    return st;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check. Compares analytic gradients of flow_loss
// against central differences at a perturbed (non-init) parameter point.

struct GradCheckReport {
    double max_rel_err = 0;
    std::string worst_tensor;
    size_t checked = 0;
};

template <typename T = double>
GradCheckReport grad_check(const ModelConfig& cfg, uint64_t seed = 0, size_t probes = 240,
                           T fd_step = T(1e-5)) {
    static_assert(sizeof(T) == 8, "gradient checking wants double precision");
    Model<T> model(cfg, seed);

    // perturb every parameter (gates included) away from the zero-init saddle
    Rng prng = Rng(0xfeedULL).fork(seed);
    for (auto& ref : tensor_refs(model.params))
        for (Eigen::Index i = 0; i < ref.mat->size(); ++i)
            ref.mat->data()[i] += T(prng.normal() * 0.05);

    // two random-data examples with fixed role vectors so that all three
    // roles are exercised; data realism is irrelevant to a derivative check
    Rng rng = Rng(0xba7ULL).fork(seed + 1);
    std::vector<TrainExample<T>> examples;
    std::vector<RoleVector> role_sets(2, RoleVector(size_t(cfg.num_domains()), Role::G));
    role_sets[1][0] = Role::C;
    if (cfg.num_domains() >= 3) role_sets[1][2] = Role::X;
    for (int b = 0; b < 2; ++b) {
        TrainExample<T> ex;
        ex.input.roles = role_sets[size_t(b)];
        ex.input.t = T(b == 0 ? 0.37 : 0.71);
        ex.input.descriptor = b == 0 ? 0 : cfg.null_descriptor();
        ex.target.resize(size_t(cfg.num_domains()));
        for (int m = 0; m < cfg.num_domains(); ++m) {
            Mat<T> y0(cfg.tokens_per_domain(), cfg.token_dim(m));
            for (Eigen::Index i = 0; i < y0.size(); ++i) y0.data()[i] = T(rng.uniform(-1, 1));
            const Role role = ex.input.roles[size_t(m)];
            if (role == Role::G) {
                Mat<T> eps(y0.rows(), y0.cols());
                for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = T(rng.normal());
                ex.input.y.push_back(switch_tokens(y0, role, ex.input.t, &eps));
                ex.target[size_t(m)] = eps - y0;
            } else {
                ex.input.y.push_back(switch_tokens(y0, role, ex.input.t));
            }
        }
        examples.push_back(std::move(ex));
    }

    auto loss_of = [&]() {
        std::vector<ForwardInput<T>> inputs;
        for (auto& ex : examples) inputs.push_back(ex.input);
        const auto out = model.forward(inputs);
        return flow_loss<T>(out, examples);
    };

    // analytic gradients
    Params<T> grads = zeros_like(model.params);
    {
        std::vector<ForwardInput<T>> inputs;
        for (auto& ex : examples) inputs.push_back(ex.input);
        ChunkCache<T> cache;
        const auto out = model.forward(inputs, &cache);
        std::vector<std::vector<Mat<T>>> d_out;
        flow_loss<T>(out, examples, &d_out);
        model.backward(inputs, cache, d_out, grads);
    }

    auto prefs = tensor_refs(model.params);
    auto grefs = tensor_refs(grads);
    size_t total_params = 0;
    for (auto& r : prefs) total_params += size_t(r.mat->size());

    GradCheckReport rep;
    Rng pick = Rng(0x9cacULL).fork(seed + 2);
    for (size_t probe = 0; probe < probes; ++probe) {
        // sample a tensor proportionally to its size, then an element
        uint64_t flat = pick.below(total_params);
        size_t ti = 0;
        while (flat >= uint64_t(prefs[ti].mat->size())) {
            flat -= uint64_t(prefs[ti].mat->size());
            ++ti;
        }
        T* slot = prefs[ti].mat->data() + flat;
        const T analytic = grefs[ti].mat->data()[flat];

        const T keep = *slot;
        *slot = keep + fd_step;
        const T up = loss_of();
        *slot = keep - fd_step;
        const T dn = loss_of();
        *slot = keep;
        const T fd = (up - dn) / (2 * fd_step);

        // central differences resolve gradients down to ~eps*|loss|/h = 4e-11;
        // the 1e-6 floor keeps that noise three decades below the 1e-4 gate
        // while leaving any real formula error (relative O(1)) fully visible
        const double denom = std::max({1e-6, std::abs(double(analytic)), std::abs(double(fd))});
        const double rel = std::abs(double(analytic) - double(fd)) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_tensor = prefs[ti].name;
        }
        ++rep.checked;
    }
    return rep;
}

}  // namespace mdflow
