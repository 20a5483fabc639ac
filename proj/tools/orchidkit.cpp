#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "CLI11.hpp"
#include "json.hpp"
#include "orchidkit/config.hpp"
#include "orchidkit/inpaint.hpp"
#include "orchidkit/ldm.hpp"
#include "orchidkit/metrics.hpp"
#include "orchidkit/selfcheck.hpp"
#include "orchidkit/synthdata.hpp"
#include "orchidkit/vae.hpp"

namespace {

using nlohmann::json;
using namespace orchid;

int g_log_level = 1;  // ORCHIDKIT_LOG: 0 quiet, 1 info, 2 debug

void log_info(const std::string& msg) {
    if (g_log_level >= 1) std::cerr << "[orchidkit] " << msg << "\n";
}

void log_debug(const std::string& msg) {
    if (g_log_level >= 2) std::cerr << "[orchidkit] " << msg << "\n";
}

void write_text(const std::string& path, const std::string& body) {
    std::ofstream os(path);
    if (!os) throw ValueError("cannot write '" + path + "'");
    os << body;
}

std::string require_path(const std::string& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string("config: paths.") + what + " is required for this command");
    return p;
}

std::vector<Sample> load_data(const RunConfig& cfg) {
    auto samples = load_dataset(require_path(cfg.paths.data, "data"));
    if (samples.empty()) throw ValueError("dataset at '" + cfg.paths.data + "' is empty");
    return samples;
}

JointVae load_vae_model(const RunConfig& cfg) {
    JointVae m = JointVae::create(cfg.vae, cfg.seed);
    load_vae(require_path(cfg.paths.vae, "vae"), m);
    return m;
}

Denoiser load_denoiser_model(const RunConfig& cfg, int cond_channels) {
    Denoiser m = Denoiser::create(cfg.denoiser_config(cond_channels), cfg.seed);
    load_denoiser(require_path(cfg.paths.ldm, "ldm"), m);
    return m;
}

Sample decoded_to_sample(const DecodedTriple& d, std::vector<std::string> tags) {
    Sample s;
    s.color = d.color;
    std::size_t h = d.color.shape[1], w = d.color.shape[2];
    s.depth.values = d.depth;
    s.depth.valid = BoolMask(h, w, true);
    s.normal.vectors = d.normal;
    s.normal.valid = BoolMask(h, w, true);
    s.intrinsics = default_intrinsics(static_cast<int>(h), static_cast<int>(w));
    s.tags = std::move(tags);
    // store f32-quantized values so the container round-trips bit-exactly
    for (auto* a : {&s.color, &s.depth.values, &s.normal.vectors})
        for (double& v : a->data) v = static_cast<double>(static_cast<float>(v));
    return s;
}

std::string loss_log_line(int step, const VaeStepReport& rep) {
    json j{{"step", step},
           {"L_x", rep.losses.L_x},
           {"L_d", rep.losses.L_d},
           {"L_n", rep.losses.L_n},
           {"L_KL", rep.losses.L_kl},
           {"L_distill", rep.losses.L_distill},
           {"L_disc", rep.losses.L_disc},
           {"rec", rep.losses.rec},
           {"grad_norm", rep.grad_norm},
           {"wall_ms", rep.wall_ms},
           {"applied", rep.applied}};
    return j.dump();
}

// ---------------------------------------------------------------------------
// commands

int cmd_synth_gen(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    auto manifest = generate_dataset(cfg.dataset, cfg.out);
    log_info("wrote " + std::to_string(manifest.size()) + " samples to " + cfg.out);
    return 0;
}

int cmd_vae_train(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    auto samples = load_data(cfg);
    for (const auto& s : samples)
        if (s.color.shape[1] != static_cast<std::size_t>(cfg.vae.image_size))
            throw ConfigError("vae-train: dataset resolution " + std::to_string(s.color.shape[1]) +
                              " does not match vae.image_size " + std::to_string(cfg.vae.image_size));

    JointVae m = JointVae::create(cfg.vae, cfg.seed);
    if (!cfg.paths.vae.empty()) {
        load_vae(cfg.paths.vae, m);
        log_info("resumed from " + cfg.paths.vae);
    }
    std::vector<TrainItem> items;
    items.reserve(samples.size());
    for (const auto& s : samples) items.push_back(make_train_item(s));
    cache_distill_anchors(m, items);

    VaeOptimizers opt;
    opt.init(m, cfg.train.lr);
    RandomStream rng = RandomStream(cfg.seed).split(3);
    std::ofstream logf(cfg.out + "/train_log.jsonl");
    int rejected_streak = 0;
    bool targets_set = cfg.train.target_psnr > 0.0;

    int vae_decay_step = static_cast<int>(cfg.train.lr_decay_at * cfg.train.vae_steps);
    for (int step = 1; step <= cfg.train.vae_steps; ++step) {
        if (step == vae_decay_step && cfg.train.lr_decay != 1.0) {
            opt.enc.cfg.lr *= cfg.train.lr_decay;
            opt.dec.cfg.lr *= cfg.train.lr_decay;
            opt.disc.cfg.lr *= cfg.train.lr_decay;
        }
        std::vector<TrainItem> batch;
        for (int b = 0; b < cfg.train.batch; ++b)
            batch.push_back(items[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(items.size()) - 1))]);
        VaeStepReport rep = vae_train_step(m, batch, opt, rng);
        rejected_streak = rep.applied ? 0 : rejected_streak + 1;
        if (rejected_streak > 10) throw TrainError("vae-train: 10 consecutive rejected steps, aborting");
        if (step % cfg.train.log_every == 0 || step == 1) {
            logf << loss_log_line(step, rep) << "\n";
            logf.flush();
            log_debug("step " + std::to_string(step) + " L_x=" + std::to_string(rep.losses.L_x));
        }
        if (targets_set && cfg.train.eval_every > 0 && step % cfg.train.eval_every == 0) {
            VaeEvalReport ev = vae_eval(m, samples);
            log_info("step " + std::to_string(step) + ": psnr=" + std::to_string(ev.psnr_db) +
                     " depth_mae=" + std::to_string(ev.depth_mae) +
                     " normal_deg=" + std::to_string(ev.normal_mean_deg));
            double mae_target = cfg.train.target_depth_mae > 0 ? cfg.train.target_depth_mae : 1e9;
            double deg_target = cfg.train.target_normal_deg > 0 ? cfg.train.target_normal_deg : 1e9;
            if (ev.psnr_db >= cfg.train.target_psnr && ev.depth_mae <= mae_target &&
                ev.normal_mean_deg <= deg_target) {
                log_info("targets reached at step " + std::to_string(step));
                break;
            }
        }
    }
    save_vae(cfg.out + "/vae.orcd", m);
    VaeEvalReport ev = vae_eval(m, samples);
    json j{{"psnr_db", ev.psnr_db},
           {"depth_mae", ev.depth_mae},
           {"normal_mean_deg", ev.normal_mean_deg},
           {"sample_count", ev.sample_count}};
    write_text(cfg.out + "/vae_eval.json", j.dump(2) + "\n");
    log_info("final: " + j.dump());
    return 0;
}

int cmd_vae_eval(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae m = load_vae_model(cfg);
    auto samples = load_data(cfg);
    VaeEvalReport ev = vae_eval(m, samples);
    json j{{"psnr_db", ev.psnr_db},
           {"depth_mae", ev.depth_mae},
           {"normal_mean_deg", ev.normal_mean_deg},
           {"sample_count", ev.sample_count}};
    write_text(cfg.out + "/vae_eval.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
}

struct EncodedDataset {
    std::vector<DenseArray> z0;      // scaled to model units
    std::vector<DenseArray> color_latents;  // scaled, for color conditioning
    double latent_scale = 1.0;
    double cond_scale = 1.0;
};

EncodedDataset encode_dataset(const JointVae& vae, const std::vector<Sample>& samples,
                              bool with_color_latents) {
    EncodedDataset out;
    ParamSet enc = vae.ema_enc.snapshot(vae.enc);
    for (const auto& s : samples) {
        TrainItem it = make_train_item(s);
        out.z0.push_back(vae_encode(vae, enc, it).mu);
    }
    out.latent_scale = rms_scale(out.z0);
    for (auto& z : out.z0)
        for (double& v : z.data) v /= out.latent_scale;
    if (with_color_latents) {
        for (const auto& s : samples) out.color_latents.push_back(encode_color_latent(vae, s.color));
        out.cond_scale = rms_scale(out.color_latents);
        for (auto& z : out.color_latents)
            for (double& v : z.data) v /= out.cond_scale;
    }
    return out;
}

int run_ldm_training(const ResolvedConfig& rc, Denoiser& m, const std::vector<LdmBatchItem>& data,
                     const std::string& out_name) {
    const RunConfig& cfg = rc.cfg;
    NoiseSchedule sched = cfg.build_noise_schedule();
    AdamOptimizer opt;
    opt.cfg.lr = cfg.train.lr;
    opt.init(m.params);
    RandomStream rng = RandomStream(cfg.seed).split(4);
    std::ofstream logf(cfg.out + "/train_log.jsonl");
    int rejected_streak = 0;
    int ldm_decay_step = static_cast<int>(cfg.train.lr_decay_at * cfg.train.ldm_steps);
    for (int step = 1; step <= cfg.train.ldm_steps; ++step) {
        if (step == ldm_decay_step && cfg.train.lr_decay != 1.0) opt.cfg.lr *= cfg.train.lr_decay;
        std::vector<LdmBatchItem> batch;
        for (int b = 0; b < cfg.train.batch; ++b)
            batch.push_back(data[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(data.size()) - 1))]);
        LdmStepReport rep = ldm_train_step(m, batch, sched, opt, rng, cfg.ldm.p_drop);
        rejected_streak = rep.applied ? 0 : rejected_streak + 1;
        if (rejected_streak > 10) throw TrainError("ldm-train: 10 consecutive rejected steps, aborting");
        if (step % cfg.train.log_every == 0 || step == 1) {
            json j{{"step", step},
                   {"loss", rep.loss},
                   {"null_cond", rep.null_cond_count},
                   {"grad_norm", rep.grad_norm},
                   {"wall_ms", rep.wall_ms},
                   {"applied", rep.applied}};
            logf << j.dump() << "\n";
            logf.flush();
        }
    }
    save_denoiser(cfg.out + "/" + out_name, m);
    log_info("saved " + cfg.out + "/" + out_name);
    return 0;
}

int cmd_ldm_train(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae vae = load_vae_model(cfg);
    auto samples = load_data(cfg);
    EncodedDataset enc = encode_dataset(vae, samples, false);

    Denoiser m = Denoiser::create(cfg.denoiser_config(0), cfg.seed);
    m.latent_scale = enc.latent_scale;
    std::vector<LdmBatchItem> data;
    for (std::size_t i = 0; i < samples.size(); ++i)
        data.push_back({enc.z0[i], Condition::with_tags(samples[i].tags)});
    return run_ldm_training(rc, m, data, "ldm.orcd");
}

int cmd_finetune_color(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae vae = load_vae_model(cfg);
    Denoiser text_model = load_denoiser_model(cfg, 0);
    auto samples = load_data(cfg);
    EncodedDataset enc = encode_dataset(vae, samples, true);

    Denoiser m = finetune_from_text_model(text_model, cfg.seed);
    m.latent_scale = text_model.latent_scale;
    m.cond_scale = enc.cond_scale;
    // the pretrained scale normalized a different latent population; rescale
    // the freshly encoded z0 with the model's own normalizer
    std::vector<LdmBatchItem> data;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        DenseArray z0 = enc.z0[i] * (enc.latent_scale / m.latent_scale);
        data.push_back({std::move(z0), Condition::with_color_latent(enc.color_latents[i])});
    }
    return run_ldm_training(rc, m, data, "ldm_color.orcd");
}

int cmd_sample(const ResolvedConfig& rc, const std::vector<std::string>& tags) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae vae = load_vae_model(cfg);
    Denoiser m = load_denoiser_model(cfg, 0);
    NoiseSchedule sched = cfg.build_noise_schedule();
    SamplerOptions opts;
    opts.steps = cfg.sampler.text_steps;
    opts.guidance = cfg.ldm.guidance;
    opts.ddpm = cfg.sampler.kind == "ddpm";
    std::size_t lh = static_cast<std::size_t>(cfg.vae.image_size / cfg.vae.downsample());
    SampleResult res = sample_text(m, vae, sched, tags, opts, cfg.seed, lh, lh);
    write_sample(cfg.out + "/sample_00000.osmp", decoded_to_sample(res.decoded, tags));
    json man{{"seed", cfg.seed},
             {"steps", opts.steps},
             {"guidance", opts.guidance},
             {"condition", {{"kind", "tags"}, {"tags", tags}}}};
    write_text(cfg.out + "/manifest.jsonl", man.dump() + "\n");
    log_info("wrote " + cfg.out + "/sample_00000.osmp");
    return 0;
}

int cmd_predict(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae vae = load_vae_model(cfg);
    Denoiser m = load_denoiser_model(cfg, cfg.vae.latent_channels);
    NoiseSchedule sched = cfg.build_noise_schedule();
    Sample input = read_sample(require_path(cfg.paths.input, "input"));

    GeometryPrediction pred = predict_geometry(m, vae, sched, input.color, cfg.sampler.color_steps,
                                               cfg.seed, cfg.sampler.kind == "ddpm");
    DecodedTriple d;
    d.color = input.color;
    d.depth = pred.depth;
    d.normal = pred.normal.vectors;
    std::string base = std::filesystem::path(cfg.paths.input).filename().string();
    write_sample(cfg.out + "/pred_" + base, decoded_to_sample(d, input.tags));

    if (input.depth.valid.count() >= 2) {
        DepthReport dr = depth_metrics(pred.depth, input.depth);
        write_text(cfg.out + "/depth_report.json", depth_report_json(dr) + "\n");
        write_text(cfg.out + "/depth_report.csv", depth_report_csv(dr));
        NormalReport nr = normal_metrics(pred.normal, input.normal);
        write_text(cfg.out + "/normal_report.json", normal_report_json(nr) + "\n");
        write_text(cfg.out + "/normal_report.csv", normal_report_csv(nr));
        log_info("depth " + depth_report_json(dr) + " normal " + normal_report_json(nr));
    }
    json man{{"seed", cfg.seed},
             {"steps", cfg.sampler.color_steps},
             {"guidance", 1.0},
             {"condition", {{"kind", "color_latent"}, {"input", cfg.paths.input}}}};
    write_text(cfg.out + "/manifest.jsonl", man.dump() + "\n");
    return 0;
}

int cmd_inpaint(const ResolvedConfig& rc, const std::vector<std::string>& tags) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae vae = load_vae_model(cfg);
    Denoiser m = load_denoiser_model(cfg, 0);
    NoiseSchedule sched = cfg.build_noise_schedule();

    InpaintTask task;
    task.known = read_sample(require_path(cfg.paths.input, "input"));
    task.pixel_mask = read_mask_png(require_path(cfg.paths.mask, "mask"));
    task.resample = cfg.inpaint.resample;
    task.jump = cfg.inpaint.jump;
    task.dilation = cfg.inpaint.dilation;
    task.tags = tags;

    InpaintResult res = inpaint(task, m, vae, sched, cfg.seed);
    if (res.ran_unconditional) log_info("warning: fully-masked task ran as unconditional generation");
    write_sample(cfg.out + "/inpaint_00000.osmp", decoded_to_sample(res.decoded, task.known.tags));
    json man{{"seed", cfg.seed},
             {"steps", sched.T},
             {"resample", task.resample},
             {"jump", task.jump},
             {"condition", tags.empty() ? json{{"kind", "none"}} : json{{"kind", "tags"}, {"tags", tags}}}};
    write_text(cfg.out + "/manifest.jsonl", man.dump() + "\n");
    log_info("wrote " + cfg.out + "/inpaint_00000.osmp");
    return 0;
}

struct PredPair {
    Sample gt;
    Sample pred;
};

std::vector<PredPair> load_pred_pairs(const RunConfig& cfg) {
    auto manifest = read_manifest(require_path(cfg.paths.data, "data"));
    std::string pred_dir = require_path(cfg.paths.pred, "pred");
    std::vector<PredPair> out;
    for (const auto& e : manifest) {
        std::string pred_path = pred_dir + "/pred_" + e.file;
        if (!std::filesystem::exists(pred_path)) continue;
        out.push_back({read_sample(cfg.paths.data + "/" + e.file), read_sample(pred_path)});
    }
    if (out.empty()) throw ValueError("no matching pred_* containers under '" + pred_dir + "'");
    return out;
}

int cmd_eval_depth(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    std::vector<DepthReport> reports;
    for (const auto& p : load_pred_pairs(cfg)) reports.push_back(depth_metrics(p.pred.depth.values, p.gt.depth));
    DepthReport agg = aggregate_depth(reports);
    write_text(cfg.out + "/depth_report.json", depth_report_json(agg) + "\n");
    write_text(cfg.out + "/depth_report.csv", depth_report_csv(agg));
    std::cout << depth_report_json(agg) << "\n";
    return 0;
}

int cmd_eval_normal(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    std::vector<NormalReport> reports;
    for (const auto& p : load_pred_pairs(cfg)) reports.push_back(normal_metrics(p.pred.normal, p.gt.normal));
    NormalReport agg = aggregate_normal(reports);
    write_text(cfg.out + "/normal_report.json", normal_report_json(agg) + "\n");
    write_text(cfg.out + "/normal_report.csv", normal_report_csv(agg));
    std::cout << normal_report_json(agg) << "\n";
    return 0;
}

int cmd_eval_consistency(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    std::vector<ConsistencyInput> inputs;
    for (const auto& p : load_pred_pairs(cfg))
        inputs.push_back({p.pred.depth.values, p.pred.normal, p.gt.depth, p.gt.intrinsics});
    ConsistencyReport rep = consistency_table(inputs);
    write_text(cfg.out + "/consistency_report.json", consistency_report_json(rep) + "\n");
    write_text(cfg.out + "/consistency_report.csv", consistency_report_csv(rep));
    std::cout << consistency_report_json(rep) << "\n";
    return 0;
}

int cmd_pca_latents(const ResolvedConfig& rc) {
    const RunConfig& cfg = rc.cfg;
    echo_run_metadata(cfg.out, rc.json);
    JointVae vae = load_vae_model(cfg);
    auto samples = load_data(cfg);
    ParamSet enc = vae.ema_enc.snapshot(vae.enc);
    std::vector<DenseArray> latents;
    for (const auto& s : samples) {
        TrainItem it = make_train_item(s);
        latents.push_back(vae_encode(vae, enc, it).mu);
    }
    int k = latent_pca_redundancy(latents, cfg.pca.variance_target);
    auto spectrum = latent_pca_spectrum(latents);
    json j{{"variance_target", cfg.pca.variance_target}, {"basis_count", k}, {"spectrum", spectrum}};
    write_text(cfg.out + "/pca_report.json", j.dump(2) + "\n");
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_selftest() {
    auto results = run_property_suite();
    std::cout << format_results(results);
    for (const auto& r : results)
        if (!r.pass) return 1;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* lvl = std::getenv("ORCHIDKIT_LOG")) g_log_level = std::atoi(lvl);

    CLI::App app{"orchidkit: joint color-depth-normal latent diffusion toolkit"};
    app.require_subcommand(0, 0);
    std::string command;
    std::string config_path;
    std::vector<std::string> sets;
    std::vector<std::string> tags;
    std::string out_flag;
    std::int64_t seed_flag = -1;
    int jobs_flag = -1;

    app.add_option("command", command,
                   "one of: synth-gen vae-train vae-eval ldm-train finetune-color sample predict "
                   "inpaint eval-depth eval-normal eval-consistency pca-latents selftest")
        ->required();
    app.add_option("--config", config_path, "configuration file (JSON)");
    app.add_option("--set", sets, "dotted-path override, e.g. --set train.lr=0.001")->take_all();
    app.add_option("--seed", seed_flag, "global seed override");
    app.add_option("--jobs", jobs_flag, "worker pool bound");
    app.add_option("--out", out_flag, "output directory override");
    app.add_option("--tags", tags, "condition tokens for sample/inpaint")->take_all();

    CLI11_PARSE(app, argc, argv);

    try {
        if (command == "selftest") return cmd_selftest();

        std::vector<std::string> overrides = sets;
        if (seed_flag >= 0) overrides.push_back("seed=" + std::to_string(seed_flag));
        if (jobs_flag >= 0) overrides.push_back("jobs=" + std::to_string(jobs_flag));
        if (!out_flag.empty()) overrides.push_back("out=" + out_flag);
        ResolvedConfig rc = resolve_config(config_path, overrides);

        if (command == "synth-gen") return cmd_synth_gen(rc);
        if (command == "vae-train") return cmd_vae_train(rc);
        if (command == "vae-eval") return cmd_vae_eval(rc);
        if (command == "ldm-train") return cmd_ldm_train(rc);
        if (command == "finetune-color") return cmd_finetune_color(rc);
        if (command == "sample") return cmd_sample(rc, tags);
        if (command == "predict") return cmd_predict(rc);
        if (command == "inpaint") return cmd_inpaint(rc, tags);
        if (command == "eval-depth") return cmd_eval_depth(rc);
        if (command == "eval-normal") return cmd_eval_normal(rc);
        if (command == "eval-consistency") return cmd_eval_consistency(rc);
        if (command == "pca-latents") return cmd_pca_latents(rc);
        throw ConfigError("unknown command '" + command + "'");
    } catch (const ConfigError& e) {
        std::cerr << json{{"error", "config"}, {"message", e.what()}}.dump() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << json{{"error", "runtime"}, {"message", e.what()}}.dump() << "\n";
        return 1;
    }
}
