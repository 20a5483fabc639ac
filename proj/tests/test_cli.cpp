#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "orchidkit/config.hpp"
#include "orchidkit/inpaint.hpp"
#include "orchidkit/synthdata.hpp"

using namespace orchid;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    fs::path p = fs::temp_directory_path() / "orchidkit_test_cli";
    fs::create_directories(p);
    return p;
}

std::string cli_binary() {
    const char* bin = std::getenv("ORCHIDKIT_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "ORCHIDKIT_BIN must point at the orchidkit binary");
    return bin;
}

int run_cli(const std::string& args) {
    std::string cmd = cli_binary() + " " + args + " 2>> " + (scratch() / "cli_stderr.log").string();
    int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

// tiny-but-real configuration used across the CLI pipeline tests
std::string tiny_config_path() {
    json cfg = {
        {"schedule", {{"T", 60}}},
        {"vae",
         {{"stage_widths", {8, 8}}, {"blocks_per_stage", 1}, {"image_size", 16},
          {"lpips_scales", 2}, {"lpips_channels", 4}}},
        {"ldm", {{"base_width", 16}, {"temb_dim", 16}, {"emb_dim", 32}}},
        {"sampler", {{"text_steps", 4}, {"color_steps", 4}}},
        {"inpaint", {{"resample", 1}, {"jump", 0}}},
        {"dataset", {{"count", 3}, {"height", 16}, {"width", 16}, {"max_objects", 2}}},
        {"train", {{"vae_steps", 2}, {"ldm_steps", 2}, {"batch", 2}, {"eval_every", 0}}},
    };
    fs::path p = scratch() / "tiny.json";
    std::ofstream os(p);
    os << cfg.dump(2);
    return p.string();
}

}  // namespace

TEST_CASE("config: defaults, strict keys and overrides") {
    json base = default_config_json();
    SUBCASE("unknown keys are rejected with the offending path") {
        json user = {{"vae", {{"weights", {{"kl_typo", 1.0}}}}}};
        CHECK_THROWS_WITH_AS(merge_config(base, user), doctest::Contains("vae.weights.kl_typo"),
                             ConfigError);
    }
    SUBCASE("value kinds are enforced") {
        json user = {{"schedule", {{"T", "a lot"}}}};
        CHECK_THROWS_AS(merge_config(base, user), ConfigError);
    }
    SUBCASE("dotted overrides land and validate") {
        json cfg = base;
        apply_override(cfg, "vae.weights.kl=0.25");
        CHECK(cfg["vae"]["weights"]["kl"].get<double>() == 0.25);
        apply_override(cfg, "sampler.kind=ddpm");
        CHECK(cfg["sampler"]["kind"] == "ddpm");
        CHECK_THROWS_WITH_AS(apply_override(cfg, "no.such.key=1"), doctest::Contains("no"),
                             ConfigError);
        CHECK_THROWS_AS(apply_override(cfg, "schedule=5"), ConfigError);
        CHECK_THROWS_AS(apply_override(cfg, "malformed"), ConfigError);
    }
    SUBCASE("every default passes the struct-level validation") {
        RunConfig cfg = config_from_json(base);
        CHECK(cfg.schedule.T == 1000);
        CHECK(cfg.sampler.text_steps == 100);
        CHECK(cfg.sampler.color_steps == 50);
        CHECK(cfg.vae.weights.x_rec == 1.0);
        CHECK(cfg.vae.weights.distill == 1e-6);
        CHECK(cfg.inpaint.resample == 4);
        CHECK(cfg.inpaint.jump == 10);
    }
    SUBCASE("negative weights rejected") {
        json cfg = base;
        apply_override(cfg, "vae.weights.kl=-1.0");
        CHECK_THROWS_AS(config_from_json(cfg), ConfigError);
    }
}

TEST_CASE("cli: unknown config key fails before side effects") {
    fs::path out = scratch() / "nope";
    fs::remove_all(out);
    int rc = run_cli("synth-gen --set dataset.coutn=4 --out " + out.string());
    CHECK(rc == 2);
    CHECK_FALSE(fs::exists(out));
}

TEST_CASE("cli: synth-gen is deterministic and echoes its configuration") {
    fs::path a = scratch() / "ds_a";
    fs::path b = scratch() / "ds_b";
    fs::remove_all(a);
    fs::remove_all(b);
    std::string common = "synth-gen --set dataset.count=4 --set dataset.height=16 --set dataset.width=16 --out ";
    REQUIRE(run_cli(common + a.string()) == 0);
    REQUIRE(run_cli(common + b.string()) == 0);

    auto ma = read_manifest(a.string());
    auto mb = read_manifest(b.string());
    REQUIRE(ma.size() == 4);
    for (std::size_t i = 0; i < ma.size(); ++i) CHECK(ma[i].checksum == mb[i].checksum);
    CHECK(fs::exists(a / "resolved_config.json"));
    CHECK(fs::exists(a / "version.txt"));
}

TEST_CASE("cli: full pipeline on a tiny configuration") {
    std::string cfg = tiny_config_path();
    fs::path root = scratch() / "pipeline";
    fs::remove_all(root);
    fs::create_directories(root);
    std::string data = (root / "data").string();
    std::string vae_dir = (root / "vae").string();
    std::string ldm_dir = (root / "ldm").string();
    std::string color_dir = (root / "color").string();

    REQUIRE(run_cli("synth-gen --config " + cfg + " --out " + data) == 0);
    REQUIRE(run_cli("vae-train --config " + cfg + " --set paths.data=" + data + " --out " + vae_dir) == 0);
    REQUIRE(fs::exists(vae_dir + "/vae.orcd"));
    REQUIRE(fs::exists(vae_dir + "/train_log.jsonl"));

    std::string vae_ckpt = vae_dir + "/vae.orcd";
    REQUIRE(run_cli("ldm-train --config " + cfg + " --set paths.data=" + data +
                    " --set paths.vae=" + vae_ckpt + " --out " + ldm_dir) == 0);
    REQUIRE(fs::exists(ldm_dir + "/ldm.orcd"));

    REQUIRE(run_cli("finetune-color --config " + cfg + " --set paths.data=" + data +
                    " --set paths.vae=" + vae_ckpt + " --set paths.ldm=" + ldm_dir +
                    "/ldm.orcd --out " + color_dir) == 0);
    REQUIRE(fs::exists(color_dir + "/ldm_color.orcd"));

    SUBCASE("sample determinism across runs") {
        fs::path s1 = root / "s1", s2 = root / "s2";
        std::string base = "sample --config " + cfg + " --set paths.vae=" + vae_ckpt +
                           " --set paths.ldm=" + ldm_dir + "/ldm.orcd --seed 5 --tags wall --out ";
        REQUIRE(run_cli(base + s1.string()) == 0);
        REQUIRE(run_cli(base + s2.string()) == 0);
        CHECK(file_checksum((s1 / "sample_00000.osmp").string()) ==
              file_checksum((s2 / "sample_00000.osmp").string()));
    }

    SUBCASE("predict emits a container plus reports") {
        fs::path pd = root / "pred";
        REQUIRE(run_cli("predict --config " + cfg + " --set paths.vae=" + vae_ckpt +
                        " --set paths.ldm=" + color_dir + "/ldm_color.orcd --set paths.input=" +
                        data + "/sample_00000.osmp --seed 3 --out " + pd.string()) == 0);
        CHECK(fs::exists(pd / "pred_sample_00000.osmp"));
        CHECK(fs::exists(pd / "depth_report.json"));
        CHECK(fs::exists(pd / "normal_report.json"));

        // evaluation commands consume the prediction directory
        fs::path ev = root / "eval";
        std::string eval_base = " --config " + cfg + " --set paths.data=" + data +
                                " --set paths.pred=" + pd.string() + " --out " + ev.string();
        CHECK(run_cli("eval-depth" + eval_base) == 0);
        CHECK(run_cli("eval-normal" + eval_base) == 0);
        CHECK(run_cli("eval-consistency" + eval_base) == 0);
        CHECK(fs::exists(ev / "depth_report.json"));
        CHECK(fs::exists(ev / "normal_report.csv"));
        CHECK(fs::exists(ev / "consistency_report.json"));
    }

    SUBCASE("inpaint with a mask png") {
        BoolMask mask(16, 16, false);
        for (std::size_t y = 4; y < 10; ++y)
            for (std::size_t x = 4; x < 10; ++x) mask.set(y, x, true);
        std::string mask_path = (root / "mask.png").string();
        write_mask_png(mask_path, mask);
        fs::path ip = root / "inpaint";
        REQUIRE(run_cli("inpaint --config " + cfg + " --set paths.vae=" + vae_ckpt +
                        " --set paths.ldm=" + ldm_dir + "/ldm.orcd --set paths.input=" + data +
                        "/sample_00001.osmp --set paths.mask=" + mask_path + " --seed 9 --out " +
                        ip.string()) == 0);
        CHECK(fs::exists(ip / "inpaint_00000.osmp"));
    }

    SUBCASE("pca-latents reports a basis count") {
        fs::path pc = root / "pca";
        REQUIRE(run_cli("pca-latents --config " + cfg + " --set paths.data=" + data +
                        " --set paths.vae=" + vae_ckpt + " --out " + pc.string()) == 0);
        std::ifstream is(pc / "pca_report.json");
        json rep = json::parse(is);
        CHECK(rep.at("basis_count").get<int>() >= 1);
        CHECK(rep.at("basis_count").get<int>() <= 8);
    }
}

TEST_CASE("cli: commands never mutate the input dataset directory") {
    std::string cfg = tiny_config_path();
    fs::path root = scratch() / "readonly";
    fs::remove_all(root);
    std::string data = (root / "data").string();
    REQUIRE(run_cli("synth-gen --config " + cfg + " --out " + data) == 0);
    auto before = read_manifest(data);
    std::vector<std::uint64_t> sums;
    for (const auto& e : before) sums.push_back(file_checksum(data + "/" + e.file));

    REQUIRE(run_cli("vae-train --config " + cfg + " --set paths.data=" + data + " --out " +
                    (root / "vae").string()) == 0);
    auto after = read_manifest(data);
    REQUIRE(after.size() == before.size());
    for (std::size_t i = 0; i < after.size(); ++i)
        CHECK(file_checksum(data + "/" + after[i].file) == sums[i]);
}

TEST_CASE("read_mask_png rejects missing files via the cli path") {
    // mask PNG interface errors surface as runtime errors with exit 1
    std::string cfg = tiny_config_path();
    int rc = run_cli("inpaint --config " + cfg + " --set paths.vae=/nonexistent.orcd --set paths.ldm=/x --set paths.input=/y --set paths.mask=/z");
    CHECK(rc == 1);
}
