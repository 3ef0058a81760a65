#include "mdflow/train.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

using namespace mdflow;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.label_domains = 2;
    c.grid_h = c.grid_w = 4;
    c.patch = 2;
    c.channels = {3, 1, 3};
    c.width = 16;
    c.depth = 2;
    c.heads = 2;
    c.ffn_dim = 24;
    c.descriptor_vocab = 9;
    return c;
}

std::string temp_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("mdflow_train_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

std::vector<DomainSpec> two_label_domains() {
    return domains_by_names({"image", "edge", "segmentation"});
}

template <typename T>
std::vector<TrainExample<T>> fixed_batch(const ModelConfig& cfg, uint64_t seed, int n) {
    TrainConfig tc;
    Rng rng = Rng(0xabcULL).fork(seed);
    SceneConfig sc;
    const auto domains = two_label_domains();
    std::vector<TrainExample<T>> out;
    const int H = cfg.grid_h * cfg.patch, W = cfg.grid_w * cfg.patch;
    for (int b = 0; b < n; ++b) {
        const Scene scene = gen_scene(seed + uint64_t(b), sc);
        Sample s;
        s.descriptor_id = uint32_t(scene.descriptor_id);
        s.grids.push_back(render_image(scene, H, W));
        for (size_t m = 1; m < domains.size(); ++m)
            s.grids.push_back(extract_label(scene, domains[m], H, W));
        out.push_back(make_train_example<T>(cfg, tc, s, rng));
    }
    return out;
}

}  // namespace

TEST_CASE("gradient check on the tiny config") {
    const auto rep = grad_check(tiny_config(), 3);
    INFO("worst tensor: " << rep.worst_tensor << ", checked " << rep.checked);
    CHECK(rep.checked >= 200);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("masked domain patch-embed gradients are exactly zero") {
    const auto cfg = tiny_config();
    Model<double> model(cfg, 5);
    Rng prng(6);
    for (auto& ref : tensor_refs(model.params))
        for (Eigen::Index i = 0; i < ref.mat->size(); ++i)
            ref.mat->data()[i] += prng.normal() * 0.05;

    auto examples = fixed_batch<double>(cfg, 11, 2);
    // force domain 1 to X on both examples, make domains 0 and 2 G
    Rng nrng(12);
    for (auto& ex : examples) {
        ex.input.roles = {Role::G, Role::X, Role::G};
        ex.input.y[1].setZero();
        ex.target[1] = Mat<double>();
        for (int m : {0, 2}) {
            Mat<double> y0(cfg.tokens_per_domain(), cfg.token_dim(m));
            for (Eigen::Index i = 0; i < y0.size(); ++i) y0.data()[i] = nrng.uniform(-1, 1);
            Mat<double> eps(y0.rows(), y0.cols());
            for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = nrng.normal();
            ex.input.y[size_t(m)] = switch_tokens(y0, Role::G, ex.input.t, &eps);
            ex.target[size_t(m)] = eps - y0;
        }
    }
    Params<double> grads = zeros_like(model.params);
    batch_gradients(model, examples, 1, grads);
    CHECK(grads.patch_embed[1].w.cwiseAbs().maxCoeff() == 0.0);
    CHECK(grads.patch_embed[1].b.cwiseAbs().maxCoeff() == 0.0);
    // sanity: unmasked domains do receive gradient
    CHECK(grads.patch_embed[0].w.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("flow_loss contracts") {
    const auto cfg = tiny_config();
    auto examples = fixed_batch<double>(cfg, 21, 3);

    // fabricate outputs equal to the targets on G domains
    std::vector<std::vector<Mat<double>>> outputs(examples.size());
    for (size_t s = 0; s < examples.size(); ++s) {
        outputs[s].resize(examples[s].target.size());
        for (size_t m = 0; m < examples[s].target.size(); ++m) {
            if (examples[s].input.roles[m] == Role::G)
                outputs[s][m] = examples[s].target[m];
            else
                outputs[s][m] =
                    Mat<double>::Zero(cfg.tokens_per_domain(), cfg.token_dim(int(m)));
        }
    }

    SECTION("exact minimizer gives zero loss") {
        CHECK(flow_loss<double>(outputs, examples) == 0.0);
    }

    SECTION("constants added to C/X predictions change nothing, exactly") {
        const double before = flow_loss<double>(outputs, examples);
        for (size_t s = 0; s < examples.size(); ++s)
            for (size_t m = 0; m < outputs[s].size(); ++m)
                if (examples[s].input.roles[m] != Role::G)
                    outputs[s][m].array() += 123.456;
        CHECK(flow_loss<double>(outputs, examples) == before);
    }

    SECTION("fresh model loss equals mean of squared targets over G elements") {
        // v == 0 everywhere, so the loss has the closed form sum(t^2)/count
        Model<double> model(cfg, 1);
        std::vector<ForwardInput<double>> inputs;
        for (auto& ex : examples) inputs.push_back(ex.input);
        const auto out = model.forward(inputs);
        double sum = 0;
        size_t count = 0;
        for (auto& ex : examples)
            for (size_t m = 0; m < ex.target.size(); ++m)
                if (ex.input.roles[m] == Role::G) {
                    sum += ex.target[m].array().square().sum();
                    count += size_t(ex.target[m].size());
                }
        const double loss = flow_loss<double>(out, examples);
        CHECK(loss == Catch::Approx(sum / double(count)).epsilon(1e-12));
    }

    SECTION("batch without G domains is rejected") {
        for (auto& ex : examples) {
            ex.input.roles.assign(3, Role::C);
            for (auto& t : ex.target) t = Mat<double>();
        }
        CHECK_THROWS_AS(flow_loss<double>(outputs, examples), ConfigError);
    }
}

TEST_CASE("lr=0 leaves parameters bitwise unchanged") {
    const auto cfg = tiny_config();
    TrainConfig tc;
    tc.lr = 0.0;
    tc.warmup_steps = 0;
    tc.workers = 1;
    TrainState<float> st(cfg, 3);
    const Params<float> before = st.model.params;
    auto examples = fixed_batch<float>(cfg, 31, 4);
    train_step(st, examples, tc);
    auto a = tensor_refs(const_cast<Params<float>&>(before));
    auto b = tensor_refs(st.model.params);
    for (size_t i = 0; i < a.size(); ++i)
        CHECK((a[i].mat->array() == b[i].mat->array()).all());
}

TEST_CASE("single fixed batch overfits: loss drops below 10% of start") {
    const auto cfg = tiny_config();
    TrainConfig tc;
    tc.lr = 2e-3;
    tc.warmup_steps = 50;
    tc.workers = 1;
    TrainState<float> st(cfg, 7);
    auto examples = fixed_batch<float>(cfg, 41, 4);
    const float first = train_step(st, examples, tc);
    float last = first;
    for (int i = 1; i < 500; ++i) last = train_step(st, examples, tc);
    INFO("first " << first << " last " << last);
    CHECK(last < 0.1f * first);
}

TEST_CASE("same seed twice gives identical checkpoints") {
    const auto cfg = tiny_config();
    TrainConfig tc;
    tc.workers = 1;
    tc.steps = 6;
    tc.batch = 3;
    tc.checkpoint_every = 3;
    tc.log_every = 2;
    tc.seed = 5;

    const auto domains = two_label_domains();
    const std::string data_dir = temp_dir("data");
    make_dataset(12, 3, domains, cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch, 3, data_dir);
    DatasetReader reader(data_dir);

    auto run = [&](const std::string& tag) {
        const std::string out = temp_dir(tag);
        train_loop<float>(cfg, tc, reader, out);
        std::ifstream f(out + "/ckpt_last.bin", std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    const auto c1 = run("runA"), c2 = run("runB");
    CHECK(!c1.empty());
    CHECK(c1 == c2);
}

TEST_CASE("resume from a mid-run checkpoint reproduces the run bitwise") {
    const auto cfg = tiny_config();
    TrainConfig tc;
    tc.workers = 1;  // determinism mode
    tc.steps = 8;
    tc.batch = 2;
    tc.checkpoint_every = 4;
    tc.log_every = 4;
    tc.seed = 9;

    const auto domains = two_label_domains();
    const std::string data_dir = temp_dir("data2");
    make_dataset(10, 4, domains, cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch, 3, data_dir);
    DatasetReader reader(data_dir);

    const std::string full_dir = temp_dir("full");
    train_loop<float>(cfg, tc, reader, full_dir);

    const std::string resumed_dir = temp_dir("resumed");
    {
        TrainConfig tc_half = tc;
        tc_half.steps = 4;
        train_loop<float>(cfg, tc_half, reader, resumed_dir);
    }
    const auto mid = load_checkpoint<float>(resumed_dir + "/ckpt_step4.bin");
    train_loop<float>(cfg, tc, reader, resumed_dir, &mid);

    auto slurp = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(f), {});
    };
    CHECK(slurp(full_dir + "/ckpt_step8.bin") == slurp(resumed_dir + "/ckpt_step8.bin"));
}

TEST_CASE("loss CSV has one row per log interval") {
    const auto cfg = tiny_config();
    TrainConfig tc;
    tc.workers = 1;
    tc.steps = 10;
    tc.batch = 2;
    tc.checkpoint_every = 10;
    tc.log_every = 2;
    tc.seed = 1;

    const auto domains = two_label_domains();
    const std::string data_dir = temp_dir("data3");
    make_dataset(8, 5, domains, cfg.grid_h * cfg.patch, cfg.grid_w * cfg.patch, 3, data_dir);
    DatasetReader reader(data_dir);
    const std::string out = temp_dir("csv");
    train_loop<float>(cfg, tc, reader, out);

    std::ifstream f(out + "/loss.csv");
    std::string line;
    int rows = 0;
    std::getline(f, line);
    CHECK(line == "step,loss,lr,role_pattern");
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 5);  // steps / log_every
}
