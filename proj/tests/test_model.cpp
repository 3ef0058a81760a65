#include "mdflow/checkpoint.hpp"
#include "mdflow/model.hpp"

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
    c.width = 32;
    c.depth = 2;
    c.heads = 2;
    c.ffn_dim = 48;
    c.descriptor_vocab = 5;
    return c;
}

template <typename T>
ForwardInput<T> random_input(const ModelConfig& cfg, Rng& rng, const RoleVector& roles, T t,
                             int desc) {
    ForwardInput<T> in;
    in.roles = roles;
    in.t = t;
    in.descriptor = desc;
    for (int m = 0; m < cfg.num_domains(); ++m) {
        Mat<T> y(cfg.tokens_per_domain(), cfg.token_dim(m));
        if (roles[size_t(m)] == Role::X)
            y.setZero();
        else
            for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = T(rng.uniform(-1, 1));
        in.y.push_back(std::move(y));
    }
    return in;
}

}  // namespace

TEST_CASE("positional embeddings: layout, domain invariance, distinctness") {
    const auto pe = sinusoidal_pe<double>(8, 8, 64);

    SECTION("position (0,0) alternates sin=0, cos=1") {
        for (int k = 0; k < 16; ++k) {
            CHECK(pe(0, 4 * k + 0) == 0.0);
            CHECK(pe(0, 4 * k + 1) == 1.0);
            CHECK(pe(0, 4 * k + 2) == 0.0);
            CHECK(pe(0, 4 * k + 3) == 1.0);
        }
    }
    SECTION("bitwise equal across recomputations (single shared code)") {
        const auto pe2 = sinusoidal_pe<double>(8, 8, 64);
        CHECK((pe.array() == pe2.array()).all());
    }
    SECTION("distinct positions have distinct codes") {
        for (int a : {0, 9, 37})
            for (int b : {1, 20, 63}) {
                if (a == b) continue;
                CHECK((pe.row(a) - pe.row(b)).cwiseAbs().maxCoeff() > 0);
            }
    }
    SECTION("width must be divisible by 4") {
        CHECK_THROWS_AS(sinusoidal_pe<double>(2, 2, 30), ConfigError);
    }
}

TEST_CASE("fresh model predicts exactly zero") {
    const auto cfg = tiny_config();
    Model<double> model(cfg, 7);
    Rng rng(3);
    std::vector<ForwardInput<double>> chunk;
    chunk.push_back(random_input<double>(cfg, rng, {Role::G, Role::G, Role::G}, 0.3, 1));
    chunk.push_back(random_input<double>(cfg, rng, {Role::C, Role::G, Role::X}, 0.9,
                                         cfg.null_descriptor()));
    const auto out = model.forward(chunk);
    for (const auto& sample : out)
        for (const auto& dom : sample) CHECK(dom.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("parameter count matches the closed form") {
    for (auto cfg : {tiny_config(), ModelConfig{}}) {
        Model<float> model(cfg, 1);
        CHECK(param_count(model.params) == expected_param_count(cfg));
    }
}

TEST_CASE("blocks are the identity at initialization") {
    // zero-init final layers would hide the trunk, so give two models with
    // different depths the same nonzero final layers: identity blocks mean
    // extra depth changes nothing
    auto cfg = tiny_config();
    Model<double> m1(cfg, 5);
    auto cfg4 = cfg;
    cfg4.depth = 4;
    Model<double> m4(cfg4, 5);
    m4.params.role_emb = m1.params.role_emb;
    m4.params.dom_emb = m1.params.dom_emb;
    m4.params.desc_emb = m1.params.desc_emb;
    m4.params.tmlp1 = m1.params.tmlp1;
    m4.params.tmlp2 = m1.params.tmlp2;
    m4.params.patch_embed = m1.params.patch_embed;
    Rng rng(11);
    for (int m = 0; m < cfg.num_domains(); ++m) {
        auto& f1 = m1.params.final_out[size_t(m)];
        for (Eigen::Index i = 0; i < f1.w.size(); ++i) f1.w.data()[i] = rng.normal() * 0.1;
        m4.params.final_out[size_t(m)] = f1;
    }
    std::vector<ForwardInput<double>> chunk{
        random_input<double>(cfg, rng, {Role::G, Role::C, Role::G}, 0.5, 2)};
    const auto o1 = m1.forward(chunk);
    const auto o4 = m4.forward(chunk);
    for (int m = 0; m < cfg.num_domains(); ++m)
        CHECK((o1[0][size_t(m)] - o4[0][size_t(m)]).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("null descriptor vs real descriptor: identical while cross-out is zero") {
    const auto cfg = tiny_config();
    Model<double> model(cfg, 6);
    // nonzero final layers and gates, but keep cross-attention out-proj zero
    Rng prng(8);
    for (auto& ref : tensor_refs(model.params)) {
        if (ref.name.find("cross.o") != std::string::npos) continue;
        for (Eigen::Index i = 0; i < ref.mat->size(); ++i)
            ref.mat->data()[i] += prng.normal() * 0.05;
    }
    Rng rng(9);
    auto in = random_input<double>(cfg, rng, {Role::G, Role::G, Role::G}, 0.5, 3);
    const auto with_desc = model.forward({in});
    in.descriptor = cfg.null_descriptor();
    const auto with_null = model.forward({in});
    for (int m = 0; m < cfg.num_domains(); ++m)
        CHECK((with_desc[0][size_t(m)] - with_null[0][size_t(m)]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("embedded tokens: PE shared, conditioning sum structure") {
    auto cfg = tiny_config();
    cfg.channels = {3, 3, 3};  // equal dims so patch embeds are identical
    Model<double> model(cfg, 9);
    Rng rng(13);

    SECTION("two domains with equal raw tokens embed identically (shared PE)") {
        auto in = random_input<double>(cfg, rng, {Role::G, Role::G, Role::G}, 0.25, 0);
        in.y[2] = in.y[1];
        ChunkCache<double> cache;
        model.forward({in}, &cache);
        const int N = cfg.tokens_per_domain();
        // identical raw tokens + identical patch embeds + shared PE give
        // identical normalized trunk inputs
        const auto& n1 = cache.blocks[0].n1;
        CHECK((n1.middleRows(N, N) - n1.middleRows(2 * N, N)).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("flipping one domain's role changes only that conditioning row") {
        auto in = random_input<double>(cfg, rng, {Role::G, Role::G, Role::G}, 0.25, 0);
        ChunkCache<double> c1, c2;
        model.forward({in}, &c1);
        in.roles[1] = Role::C;
        model.forward({in}, &c2);
        CHECK((c1.c_vec.row(0) - c2.c_vec.row(0)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((c1.c_vec.row(1) - c2.c_vec.row(1)).cwiseAbs().maxCoeff() > 0.0);
        CHECK((c1.c_vec.row(2) - c2.c_vec.row(2)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("X-domain inputs cannot influence other domains") {
    const auto cfg = tiny_config();
    Model<double> model(cfg, 21);
    // perturb all parameters away from the zero-init saddle so the trunk is
    // genuinely nonlinear
    Rng prng(22);
    for (auto& ref : tensor_refs(model.params))
        for (Eigen::Index i = 0; i < ref.mat->size(); ++i)
            ref.mat->data()[i] += prng.normal() * 0.05;

    Rng rng(23);
    auto in = random_input<double>(cfg, rng, {Role::G, Role::X, Role::C}, 0.4, 1);
    const auto base = model.forward({in});

    // arbitrary garbage in the X domain's tokens
    for (Eigen::Index i = 0; i < in.y[1].size(); ++i) in.y[1].data()[i] = rng.normal() * 50.0;
    const auto poked = model.forward({in});

    CHECK((base[0][0] - poked[0][0]).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK((base[0][2] - poked[0][2]).cwiseAbs().maxCoeff() <= 1e-6);
    // and in this architecture the invariance is exact
    CHECK((base[0][0] - poked[0][0]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forward determinism: identical calls give bitwise-equal outputs") {
    const auto cfg = tiny_config();
    Model<float> model(cfg, 31);
    Rng prng(32);
    for (auto& ref : tensor_refs(model.params))
        for (Eigen::Index i = 0; i < ref.mat->size(); ++i)
            ref.mat->data()[i] += float(prng.normal() * 0.05);
    Rng rng(33);
    const auto in = random_input<float>(cfg, rng, {Role::C, Role::G, Role::G}, 0.7f,
                                        cfg.null_descriptor());
    const auto a = model.forward({in});
    const auto b = model.forward({in});
    for (int m = 0; m < cfg.num_domains(); ++m)
        CHECK((a[0][size_t(m)].array() == b[0][size_t(m)].array()).all());
}

TEST_CASE("input validation") {
    const auto cfg = tiny_config();
    Model<float> model(cfg, 1);
    Rng rng(2);
    auto in = random_input<float>(cfg, rng, {Role::G, Role::G, Role::G}, 0.5f, 0);

    SECTION("bad descriptor") {
        in.descriptor = cfg.descriptor_vocab + 1;
        CHECK_THROWS_AS(model.forward({in}), ConfigError);
    }
    SECTION("bad t") {
        in.t = 1.5f;
        CHECK_THROWS_AS(model.forward({in}), ConfigError);
    }
    SECTION("bad token shape") {
        in.y[1].resize(3, 3);
        CHECK_THROWS_AS(model.forward({in}), ConfigError);
    }
}

TEST_CASE("checkpoint round-trip preserves everything") {
    const auto cfg = tiny_config();
    Model<float> model(cfg, 41);
    Rng prng(42);
    for (auto& ref : tensor_refs(model.params))
        for (Eigen::Index i = 0; i < ref.mat->size(); ++i)
            ref.mat->data()[i] += float(prng.normal() * 0.1);

    Checkpoint<float> ck;
    ck.config = cfg;
    ck.step = 1234;
    ck.rng_state = {1, 2, 3, 4};
    ck.params = model.params;
    ck.adam_m = zeros_like(model.params);
    ck.adam_v = zeros_like(model.params);
    ck.adam_m.role_emb.setConstant(0.5f);
    ck.has_optimizer = true;

    const auto path = (std::filesystem::temp_directory_path() / "mdflow_ck.bin").string();
    save_checkpoint(path, ck);
    auto back = load_checkpoint<float>(path);

    CHECK(back.step == 1234);
    CHECK(back.rng_state == std::array<uint64_t, 4>{1, 2, 3, 4});
    CHECK(back.has_optimizer);
    CHECK(back.config.to_text() == cfg.to_text());

    auto a = tensor_refs(ck.params);
    auto b = tensor_refs(back.params);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i)
        CHECK((a[i].mat->array() == b[i].mat->array()).all());
    CHECK((back.adam_m.role_emb.array() == 0.5f).all());

    SECTION("corruption is detected") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.put(char(0x5a));
        f.close();
        CHECK_THROWS_AS(load_checkpoint<float>(path), IoError);
    }
    std::filesystem::remove(path);
}
