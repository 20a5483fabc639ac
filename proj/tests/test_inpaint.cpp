#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "orchidkit/inpaint.hpp"

using namespace orchid;

namespace {

struct Fixture {
    JointVae vae;
    Denoiser den;
    NoiseSchedule sched;
    Sample known;

    static Fixture make() {
        VaeConfig vcfg;
        vcfg.stage_widths = {8, 8};
        vcfg.blocks_per_stage = 1;
        vcfg.image_size = 16;
        vcfg.lpips_scales = 2;
        vcfg.lpips_channels = 4;
        DenoiserConfig dc;
        dc.base_width = 16;
        dc.temb_dim = 16;
        dc.emb_dim = 32;
        dc.T = 90;
        dc.vocabulary = tag_vocabulary();
        DatasetOptions opts;
        opts.height = opts.width = 16;
        opts.scene.max_objects = 2;
        return Fixture{JointVae::create(vcfg, 1001), Denoiser::create(dc, 1002),
                       build_schedule(90, 0.00085, 0.012, true),
                       render(scene_for_index(17, 0, opts.scene), 16, 16)};
    }
};

}  // namespace

TEST_CASE("derive_latent_mask block arithmetic") {
    SUBCASE("empty and full") {
        CHECK(derive_latent_mask(BoolMask(32, 32, false), 8, 1).count() == 0);
        CHECK(derive_latent_mask(BoolMask(32, 32, true), 8, 1).count() == 16);
    }
    SUBCASE("single pixel dilates to a 3x3 latent block") {
        BoolMask px(32, 32, false);
        px.set(12, 20, true);  // latent cell (1, 2)
        BoolMask lm = derive_latent_mask(px, 8, 1);
        CHECK(lm.count() == 9);
        for (std::size_t y = 0; y <= 2; ++y)
            for (std::size_t x = 1; x <= 3; ++x) CHECK(lm.at(y, x));
    }
    SUBCASE("dilation clips at the raster border") {
        BoolMask px(32, 32, false);
        px.set(0, 0, true);
        BoolMask lm = derive_latent_mask(px, 8, 1);
        CHECK(lm.count() == 4);  // 2x2 corner block
    }
    SUBCASE("no dilation marks exactly the touched cells") {
        BoolMask px(32, 32, false);
        px.set(9, 9, true);
        BoolMask lm = derive_latent_mask(px, 8, 0);
        CHECK(lm.count() == 1);
        CHECK(lm.at(1, 1));
    }
    SUBCASE("indivisible extents rejected") {
        CHECK_THROWS_AS(derive_latent_mask(BoolMask(30, 32, false), 8, 1), ShapeError);
    }
}

TEST_CASE("repaint plan structure") {
    SUBCASE("r = 1 or j = 0 is a plain descent") {
        for (auto [r, j] : {std::pair{1, 10}, std::pair{4, 0}}) {
            auto plan = repaint_plan(30, r, j);
            REQUIRE(plan.size() == 30);
            for (std::size_t i = 0; i < plan.size(); ++i) {
                CHECK(plan[i].first == 30 - static_cast<int>(i));
                CHECK(plan[i].second);
            }
        }
    }
    SUBCASE("jumps revisit each segment r times") {
        int T = 20, r = 3, j = 5;
        auto plan = repaint_plan(T, r, j);
        // every down entry at anchor multiples gets revisited
        int downs = 0, ups = 0;
        int t_check = T;
        for (auto [t, down] : plan) {
            CHECK(t == t_check);
            t_check += down ? -1 : +1;
            (down ? downs : ups)++;
        }
        CHECK(t_check == 0);  // plan ends exactly at t = 0
        CHECK(ups == (r - 1) * j * 3);  // anchors at 15, 10, 5
        CHECK(downs == T + ups);
    }
}

TEST_CASE("inpainting latent contracts") {
    Fixture f = Fixture::make();

    InpaintTask task;
    task.known = f.known;
    task.pixel_mask = BoolMask(16, 16, false);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 8; x < 16; ++x) task.pixel_mask.set(y, x, true);
    task.resample = 2;
    task.jump = 6;
    task.dilation = 1;

    SUBCASE("unmasked latent cells of the final z0 equal the known latents bitwise") {
        InpaintResult res = inpaint(task, f.den, f.vae, f.sched, 71);
        DenseArray z_known = inpaint_known_latents(task, f.den, f.vae);
        std::size_t plane = res.latent_mask.h * res.latent_mask.w;
        REQUIRE(res.latent_mask.count() < plane);
        std::size_t checked = 0;
        for (std::size_t i = 0; i < plane; ++i) {
            if (res.latent_mask.m[i]) continue;
            for (std::size_t c = 0; c < z_known.shape[0]; ++c)
                CHECK(res.z0.data[c * plane + i] == z_known.data[c * plane + i]);
            ++checked;
        }
        CHECK(checked > 0);
    }

    SUBCASE("empty mask returns the known latents and the vae reconstruction") {
        InpaintTask empty = task;
        empty.pixel_mask = BoolMask(16, 16, false);
        InpaintResult res = inpaint(empty, f.den, f.vae, f.sched, 72);
        CHECK_FALSE(res.ran_unconditional);
        DenseArray z_known = inpaint_known_latents(empty, f.den, f.vae);
        CHECK(res.z0.data == z_known.data);
        ParamSet dec = f.vae.ema_dec.snapshot(f.vae.dec);
        DecodedTriple recon = vae_decode(f.vae, dec, z_known * f.den.latent_scale);
        CHECK(res.decoded.color.data == recon.color.data);
        CHECK(res.decoded.depth.data == recon.depth.data);
        CHECK(res.decoded.normal.data == recon.normal.data);
    }

    SUBCASE("full mask with r=1, j=0 matches the unconditional ddpm trajectory") {
        InpaintTask full = task;
        full.pixel_mask = BoolMask(16, 16, true);
        full.resample = 1;
        full.jump = 0;
        InpaintResult res = inpaint(full, f.den, f.vae, f.sched, 73);
        CHECK(res.ran_unconditional);
        DenseArray ref = sample_latent_ddpm(f.den, f.sched, Condition::none(), 73, 4, 4);
        CHECK(res.z0.data == ref.data);
    }

    SUBCASE("fixed seeds reproduce bitwise") {
        InpaintResult a = inpaint(task, f.den, f.vae, f.sched, 74);
        InpaintResult b = inpaint(task, f.den, f.vae, f.sched, 74);
        CHECK(a.z0.data == b.z0.data);
        CHECK(a.decoded.color.data == b.decoded.color.data);
    }

    SUBCASE("monotone merge: edits inside the mask never move the known branch") {
        DenseArray z1 = inpaint_known_latents(task, f.den, f.vae);
        InpaintTask edited = task;
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 8; x < 16; ++x) {
                edited.known.color.at(0, y, x) = 0.123;
                edited.known.depth.values.at(y, x) = 9.0;
            }
        DenseArray z2 = inpaint_known_latents(edited, f.den, f.vae);
        CHECK(z1.data == z2.data);
    }

    SUBCASE("color-conditioned models rejected") {
        DenoiserConfig dc = f.den.cfg;
        dc.cond_latent_channels = 8;
        Denoiser cc = Denoiser::create(dc, 75);
        CHECK_THROWS_AS(inpaint(task, cc, f.vae, f.sched, 76), ValueError);
    }
}

TEST_CASE("mask png round trip and guards") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "orchidkit_test_inpaint";
    fs::create_directories(dir);
    std::string path = (dir / "mask.png").string();

    RandomStream rng(5);
    BoolMask m(13, 21, false);
    for (auto& v : m.m) v = rng.uniform() < 0.4 ? 1 : 0;
    write_mask_png(path, m);
    BoolMask got = read_mask_png(path);
    CHECK(got.h == m.h);
    CHECK(got.w == m.w);
    CHECK(got.m == m.m);

    std::string bad = (dir / "not_png.png").string();
    std::ofstream os(bad, std::ios::binary);
    os << "definitely not a png";
    os.close();
    CHECK_THROWS_AS(read_mask_png(bad), ValueError);
}
