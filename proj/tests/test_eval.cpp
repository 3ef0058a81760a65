#include "mdflow/eval.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace mdflow;

namespace {
GridF constant_grid(int h, int w, int c, float v) {
    GridF g(h, w, c);
    for (auto& x : g.v) x = v;
    return g;
}
}  // namespace

TEST_CASE("reextract_consistency basics") {
    const auto domains = default_domains();
    const Scene scene = gen_scene(5, SceneConfig{});
    const GridF img = render_image(scene, 32, 32);

    SECTION("ground-truth pairs give exactly zero") {
        const GridF edge = extract_label(scene, domains[1], 32, 32);
        CHECK(reextract_consistency(img, edge, domains[1]) == 0.0);
        const GridF seg = extract_label(scene, domains[3], 32, 32);
        CHECK(reextract_consistency(img, seg, domains[3]) == 0.0);
    }

    SECTION("negated edge map gives twice the disagreeing fraction") {
        GridF edge = extract_label(scene, domains[1], 32, 32);
        for (auto& v : edge.v) v = -v;
        const double err = reextract_consistency(img, edge, domains[1]);
        CHECK(err > 0.0);
        CHECK(err <= 2.0);
        CHECK(err == Catch::Approx(2.0).epsilon(1e-12));  // every pixel flips
    }

    SECTION("misaligned shapes are rejected") {
        const GridF edge = extract_label(scene, domains[1], 16, 16);
        CHECK_THROWS_AS(reextract_consistency(img, edge, domains[1]), ConfigError);
    }
}

TEST_CASE("mae and absrel") {
    const GridF a = constant_grid(4, 4, 1, 0.5f);

    SECTION("identical inputs give exactly zero") {
        CHECK(mae(a, a) == 0.0);
        CHECK(absrel(a, a) == 0.0);
    }
    SECTION("absrel of a 1.1x prediction in rescaled space is 0.1") {
        GridF gt(4, 4, 1), pred(4, 4, 1);
        // rescaled gt value g = 0.1 + (v+1)/2; choose v so g = 1.0, pred 1.1
        for (auto& v : gt.v) v = 0.8f;
        for (auto& v : pred.v) v = 0.8f + 0.2f;  // shifts g by +0.1 exactly
        CHECK(absrel(pred, gt) == Catch::Approx(0.1).epsilon(1e-6));
    }
    SECTION("positive whenever inputs differ") {
        GridF b = a;
        b.v[3] += 0.25f;
        CHECK(mae(a, b) > 0.0);
        CHECK(absrel(b, a) > 0.0);
    }
    SECTION("shape safety") {
        const GridF c = constant_grid(4, 5, 1, 0.0f);
        CHECK_THROWS_AS(mae(a, c), ConfigError);
        CHECK_THROWS_AS(absrel(a, c), ConfigError);
    }
}

TEST_CASE("segmentation IoU") {
    const auto pal = seg_palette();

    SECTION("perfect prediction: every present class IoU 1") {
        GridF g(4, 4, 3);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const auto& a = pal[size_t(x < 2 ? 0 : 3)];
                g.at(y, x, 0) = a.r;
                g.at(y, x, 1) = a.g;
                g.at(y, x, 2) = a.b;
            }
        const auto s = seg_accuracy(g, g, pal);
        CHECK(s.miou == 1.0);
        CHECK(s.iou[0] == 1.0);
        CHECK(std::isnan(s.iou[1]));  // absent from both: excluded
    }

    SECTION("uniform prediction vs two equal-area classes") {
        // pred: all class 0; gt: half class 0, half class 1
        GridF pred(4, 4, 3), gt(4, 4, 3);
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const auto& p = pal[0];
                pred.at(y, x, 0) = p.r;
                pred.at(y, x, 1) = p.g;
                pred.at(y, x, 2) = p.b;
                const auto& t = pal[size_t(x < 2 ? 0 : 1)];
                gt.at(y, x, 0) = t.r;
                gt.at(y, x, 1) = t.g;
                gt.at(y, x, 2) = t.b;
            }
        const auto s = seg_accuracy(pred, gt, pal);
        CHECK(s.iou[0] == Catch::Approx(0.5));
        CHECK(s.iou[1] == 0.0);
        CHECK(s.miou == Catch::Approx(0.25));
    }

    SECTION("disjoint prediction gives zero mIoU") {
        GridF pred(2, 2, 3), gt(2, 2, 3);
        for (int i = 0; i < 4; ++i) {
            pred.at(i / 2, i % 2, 0) = pal[0].r;
            pred.at(i / 2, i % 2, 1) = pal[0].g;
            pred.at(i / 2, i % 2, 2) = pal[0].b;
            gt.at(i / 2, i % 2, 0) = pal[1].r;
            gt.at(i / 2, i % 2, 1) = pal[1].g;
            gt.at(i / 2, i % 2, 2) = pal[1].b;
        }
        CHECK(seg_accuracy(pred, gt, pal).miou == 0.0);
    }

    SECTION("unsnapped grids are rejected") {
        GridF pred = constant_grid(2, 2, 3, 0.123f);
        CHECK_THROWS_AS(seg_accuracy(pred, pred, pal), ConfigError);
    }

    SECTION("IoU values stay in [0,1]") {
        Rng rng(3);
        GridF pred(6, 6, 3), gt(6, 6, 3);
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                const auto& p = pal[rng.below(4)];
                pred.at(y, x, 0) = p.r;
                pred.at(y, x, 1) = p.g;
                pred.at(y, x, 2) = p.b;
                const auto& t = pal[rng.below(4)];
                gt.at(y, x, 0) = t.r;
                gt.at(y, x, 1) = t.g;
                gt.at(y, x, 2) = t.b;
            }
        const auto s = seg_accuracy(pred, gt, pal);
        CHECK(s.miou >= 0.0);
        CHECK(s.miou <= 1.0);
        for (double v : s.iou)
            if (!std::isnan(v)) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
    }
}

TEST_CASE("ensemble") {
    const auto domains = default_domains();

    SECTION("identical samples are a fixed point") {
        const GridF g = constant_grid(3, 3, 1, 0.25f);
        const GridF e = ensemble({g, g, g, g, g}, domains[1]);
        CHECK(e.v == g.v);
    }
    SECTION("continuous mean") {
        const GridF a = constant_grid(2, 2, 1, 0.0f), b = constant_grid(2, 2, 1, 1.0f);
        const GridF e = ensemble({a, b}, domains[2]);
        for (float v : e.v) CHECK(v == 0.5f);
    }
    SECTION("palette majority with lowest-anchor tie break") {
        const auto pal = seg_palette();
        auto anchor_grid = [&](int a) {
            GridF g(1, 1, 3);
            g.at(0, 0, 0) = pal[size_t(a)].r;
            g.at(0, 0, 1) = pal[size_t(a)].g;
            g.at(0, 0, 2) = pal[size_t(a)].b;
            return g;
        };
        const GridF maj = ensemble({anchor_grid(0), anchor_grid(0), anchor_grid(1)}, domains[3]);
        CHECK(maj.at(0, 0, 0) == pal[0].r);
        // tie 2-2 between anchors 1 and 3: lowest id wins
        const GridF tie = ensemble(
            {anchor_grid(3), anchor_grid(1), anchor_grid(3), anchor_grid(1)}, domains[3]);
        CHECK(tie.at(0, 0, 0) == pal[1].r);
        CHECK(tie.at(0, 0, 1) == pal[1].g);
    }
    SECTION("empty list is rejected") {
        CHECK_THROWS_AS(ensemble({}, domains[1]), ConfigError);
    }
    SECTION("shape mismatch is rejected") {
        CHECK_THROWS_AS(
            ensemble({constant_grid(2, 2, 1, 0.f), constant_grid(3, 2, 1, 0.f)}, domains[1]),
            ConfigError);
    }
}

TEST_CASE("mean_grid baseline") {
    std::vector<GridF> grids{constant_grid(2, 2, 1, -1.0f), constant_grid(2, 2, 1, 1.0f),
                             constant_grid(2, 2, 1, 0.5f)};
    const GridF m = mean_grid(grids);
    for (float v : m.v) CHECK(v == Catch::Approx(1.0f / 6).epsilon(1e-5));
}
