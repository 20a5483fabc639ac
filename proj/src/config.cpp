#include "orchidkit/config.hpp"

#include <filesystem>
#include <fstream>

namespace orchid {

using nlohmann::json;

json default_config_json() {
    return json{
        {"seed", 0},
        {"jobs", 1},
        {"out", "runs/out"},
        {"schedule",
         {{"T", 1000}, {"beta_start", 0.00085}, {"beta_end", 0.012}, {"zero_terminal_snr", true}}},
        {"vae",
         {{"latent_channels", 8},
          {"stage_widths", {16, 24, 32}},
          {"blocks_per_stage", 2},
          {"image_size", 32},
          {"ema_decay", 0.999},
          {"lpips_channels", 8},
          {"lpips_scales", 3},
          {"weights",
           {{"x_rec", 1.0},
            {"x_adv", 0.1},
            {"x_lpips", 0.1},
            {"x_local", 1.0},
            {"d_rec", 1.0},
            {"d_grad", 0.5},
            {"n_rec", 1.0},
            {"kl", 1e-3},
            {"distill", 1e-6},
            {"gamma", 0.1}}}}},
        {"ldm",
         {{"base_width", 32}, {"temb_dim", 64}, {"emb_dim", 128}, {"p_drop", 0.1}, {"guidance", 3.0}}},
        {"sampler", {{"text_steps", 100}, {"color_steps", 50}, {"kind", "ddim"}}},
        {"inpaint", {{"resample", 4}, {"jump", 10}, {"dilation", 1}}},
        {"dataset",
         {{"count", 32},
          {"seed", 7},
          {"height", 32},
          {"width", 32},
          {"min_objects", 1},
          {"max_objects", 3},
          {"back_wall", true}}},
        {"train",
         {{"vae_steps", 3000},
          {"ldm_steps", 2000},
          {"batch", 4},
          {"lr", 1e-3},
          {"lr_decay", 0.3},
          {"lr_decay_at", 0.7},
          {"log_every", 50},
          {"eval_every", 250},
          {"target_psnr", 0.0},
          {"target_depth_mae", 0.0},
          {"target_normal_deg", 0.0}}},
        {"paths",
         {{"data", ""}, {"vae", ""}, {"ldm", ""}, {"input", ""}, {"mask", ""}, {"pred", ""}}},
        {"pca", {{"variance_target", 0.95}}},
    };
}

namespace {

bool kind_compatible(const json& base, const json& user) {
    if (base.is_number() && user.is_number()) return true;
    if (base.is_string() && user.is_string()) return true;
    if (base.is_boolean() && user.is_boolean()) return true;
    if (base.is_array() && user.is_array()) return true;
    if (base.is_object() && user.is_object()) return true;
    return false;
}

}  // namespace

json merge_config(json base, const json& user, const std::string& path) {
    if (!user.is_object())
        throw ConfigError("config: expected an object at '" + (path.empty() ? "<root>" : path) + "'");
    for (auto it = user.begin(); it != user.end(); ++it) {
        std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
        json& slot = base[it.key()];
        if (slot.is_object()) {
            slot = merge_config(slot, it.value(), key);
        } else {
            if (!kind_compatible(slot, it.value()))
                throw ConfigError("config: wrong value kind for '" + key + "'");
            slot = it.value();
        }
    }
    return base;
}

void apply_override(json& cfg, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("config: override '" + assignment + "' must look like key=value");
    std::string key = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // bare strings are fine
    }

    json* slot = &cfg;
    std::size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        auto dot = key.find('.', start);
        parts.push_back(key.substr(start, dot == std::string::npos ? dot : dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    std::string walked;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        walked = walked.empty() ? parts[i] : walked + "." + parts[i];
        if (!slot->is_object() || !slot->contains(parts[i]))
            throw ConfigError("config: unknown key '" + walked + "'");
        slot = &(*slot)[parts[i]];
    }
    if (slot->is_object()) throw ConfigError("config: '" + key + "' is a section, not a value");
    if (!kind_compatible(*slot, parsed))
        throw ConfigError("config: wrong value kind for '" + key + "'");
    *slot = parsed;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.jobs = j.at("jobs").get<int>();
    c.out = j.at("out").get<std::string>();

    const json& s = j.at("schedule");
    c.schedule.T = s.at("T").get<int>();
    c.schedule.beta_start = s.at("beta_start").get<double>();
    c.schedule.beta_end = s.at("beta_end").get<double>();
    c.schedule.zero_terminal_snr = s.at("zero_terminal_snr").get<bool>();

    const json& v = j.at("vae");
    c.vae.latent_channels = v.at("latent_channels").get<int>();
    c.vae.stage_widths = v.at("stage_widths").get<std::vector<int>>();
    c.vae.blocks_per_stage = v.at("blocks_per_stage").get<int>();
    c.vae.image_size = v.at("image_size").get<int>();
    c.vae.ema_decay = v.at("ema_decay").get<double>();
    c.vae.lpips_channels = v.at("lpips_channels").get<int>();
    c.vae.lpips_scales = v.at("lpips_scales").get<int>();
    const json& w = v.at("weights");
    c.vae.weights.x_rec = w.at("x_rec").get<double>();
    c.vae.weights.x_adv = w.at("x_adv").get<double>();
    c.vae.weights.x_lpips = w.at("x_lpips").get<double>();
    c.vae.weights.x_local = w.at("x_local").get<double>();
    c.vae.weights.d_rec = w.at("d_rec").get<double>();
    c.vae.weights.d_grad = w.at("d_grad").get<double>();
    c.vae.weights.n_rec = w.at("n_rec").get<double>();
    c.vae.weights.kl = w.at("kl").get<double>();
    c.vae.weights.distill = w.at("distill").get<double>();
    c.vae.weights.gamma = w.at("gamma").get<double>();
    const VaeLossWeights& lw = c.vae.weights;
    for (double wv : {lw.x_rec, lw.x_adv, lw.x_lpips, lw.x_local, lw.d_rec, lw.d_grad, lw.n_rec, lw.kl,
                      lw.distill, lw.gamma})
        if (wv < 0.0) throw ConfigError("config: loss weights must be >= 0");

    const json& l = j.at("ldm");
    c.ldm.base_width = l.at("base_width").get<int>();
    c.ldm.temb_dim = l.at("temb_dim").get<int>();
    c.ldm.emb_dim = l.at("emb_dim").get<int>();
    c.ldm.p_drop = l.at("p_drop").get<double>();
    c.ldm.guidance = l.at("guidance").get<double>();

    const json& sa = j.at("sampler");
    c.sampler.text_steps = sa.at("text_steps").get<int>();
    c.sampler.color_steps = sa.at("color_steps").get<int>();
    c.sampler.kind = sa.at("kind").get<std::string>();
    if (c.sampler.kind != "ddim" && c.sampler.kind != "ddpm")
        throw ConfigError("config: sampler.kind must be 'ddim' or 'ddpm'");

    const json& ip = j.at("inpaint");
    c.inpaint.resample = ip.at("resample").get<int>();
    c.inpaint.jump = ip.at("jump").get<int>();
    c.inpaint.dilation = ip.at("dilation").get<int>();
    if (c.inpaint.resample < 1) throw ConfigError("config: inpaint.resample must be >= 1");
    if (c.inpaint.jump < 0) throw ConfigError("config: inpaint.jump must be >= 0");

    const json& d = j.at("dataset");
    c.dataset.count = d.at("count").get<int>();
    c.dataset.seed = d.at("seed").get<std::uint64_t>();
    c.dataset.height = d.at("height").get<int>();
    c.dataset.width = d.at("width").get<int>();
    c.dataset.scene.min_objects = d.at("min_objects").get<int>();
    c.dataset.scene.max_objects = d.at("max_objects").get<int>();
    c.dataset.scene.back_wall = d.at("back_wall").get<bool>();
    if (c.dataset.scene.max_objects > 6) throw ConfigError("config: dataset.max_objects must be <= 6");

    const json& t = j.at("train");
    c.train.vae_steps = t.at("vae_steps").get<int>();
    c.train.ldm_steps = t.at("ldm_steps").get<int>();
    c.train.batch = t.at("batch").get<int>();
    c.train.lr = t.at("lr").get<double>();
    c.train.lr_decay = t.at("lr_decay").get<double>();
    c.train.lr_decay_at = t.at("lr_decay_at").get<double>();
    c.train.log_every = t.at("log_every").get<int>();
    c.train.eval_every = t.at("eval_every").get<int>();
    c.train.target_psnr = t.at("target_psnr").get<double>();
    c.train.target_depth_mae = t.at("target_depth_mae").get<double>();
    c.train.target_normal_deg = t.at("target_normal_deg").get<double>();

    const json& p = j.at("paths");
    c.paths.data = p.at("data").get<std::string>();
    c.paths.vae = p.at("vae").get<std::string>();
    c.paths.ldm = p.at("ldm").get<std::string>();
    c.paths.input = p.at("input").get<std::string>();
    c.paths.mask = p.at("mask").get<std::string>();
    c.paths.pred = p.at("pred").get<std::string>();

    c.pca.variance_target = j.at("pca").at("variance_target").get<double>();
    return c;
}

DenoiserConfig RunConfig::denoiser_config(int cond_latent_channels) const {
    DenoiserConfig dc;
    dc.latent_channels = vae.latent_channels;
    dc.cond_latent_channels = cond_latent_channels;
    dc.base_width = ldm.base_width;
    dc.temb_dim = ldm.temb_dim;
    dc.emb_dim = ldm.emb_dim;
    dc.T = schedule.T;
    dc.vocabulary = tag_vocabulary();
    return dc;
}

ResolvedConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides) {
    json resolved = default_config_json();
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw ConfigError("config: cannot open '" + config_path + "'");
        json user;
        try {
            user = json::parse(is);
        } catch (const json::exception& e) {
            throw ConfigError("config: parse error in '" + config_path + "': " + e.what());
        }
        resolved = merge_config(resolved, user);
    }
    for (const auto& ov : overrides) apply_override(resolved, ov);
    ResolvedConfig rc;
    rc.json = resolved;
    rc.cfg = config_from_json(resolved);
    return rc;
}

void echo_run_metadata(const std::string& out_dir, const nlohmann::json& resolved) {
    std::filesystem::create_directories(out_dir);
    std::ofstream cf(out_dir + "/resolved_config.json");
    cf << resolved.dump(2) << '\n';
    std::ofstream vf(out_dir + "/version.txt");
    vf << kVersionString << '\n';
}

}  // namespace orchid
