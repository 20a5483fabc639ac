#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "orchidkit/ldm.hpp"
#include "orchidkit/synthdata.hpp"
#include "orchidkit/vae.hpp"

namespace orchid {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kVersionString = "orchidkit 0.1.0";

/// Fully resolved run configuration. Every field has a default; unknown keys
/// are rejected during parsing so typos never pass silently.
struct RunConfig {
    std::uint64_t seed = 0;
    int jobs = 1;
    std::string out = "runs/out";

    struct Schedule {
        int T = 1000;
        double beta_start = 0.00085;
        double beta_end = 0.012;
        bool zero_terminal_snr = true;
    } schedule;

    VaeConfig vae;  // weights included

    struct Ldm {
        int base_width = 32;
        int temb_dim = 64;
        int emb_dim = 128;
        double p_drop = 0.1;
        double guidance = 3.0;
    } ldm;

    struct Sampler {
        int text_steps = 100;
        int color_steps = 50;
        std::string kind = "ddim";  // or "ddpm"
    } sampler;

    struct Inpaint {
        int resample = 4;
        int jump = 10;
        int dilation = 1;
    } inpaint;

    DatasetOptions dataset;

    struct Train {
        int vae_steps = 3000;
        int ldm_steps = 2000;
        int batch = 4;
        double lr = 1e-3;
        double lr_decay = 0.3;     // multiplier applied at lr_decay_at of the run
        double lr_decay_at = 0.7;  // fraction of total steps
        int log_every = 50;
        int eval_every = 250;
        double target_psnr = 0.0;  // early-stop targets; 0 disables
        double target_depth_mae = 0.0;
        double target_normal_deg = 0.0;
    } train;

    struct Paths {
        std::string data;
        std::string vae;
        std::string ldm;
        std::string input;
        std::string mask;
        std::string pred;
    } paths;

    struct Pca {
        double variance_target = 0.95;
    } pca;

    NoiseSchedule build_noise_schedule() const {
        return build_schedule(schedule.T, schedule.beta_start, schedule.beta_end,
                              schedule.zero_terminal_snr);
    }
    DenoiserConfig denoiser_config(int cond_latent_channels) const;
};

nlohmann::json default_config_json();

/// Validate `user` against the default tree: unknown keys and mismatched
/// value kinds are rejected with the offending dotted path.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& user,
                            const std::string& path = "");

/// Apply a dotted-path override such as "vae.weights.kl=0.01".
void apply_override(nlohmann::json& cfg, const std::string& assignment);

RunConfig config_from_json(const nlohmann::json& j);

struct ResolvedConfig {
    RunConfig cfg;
    nlohmann::json json;  // the fully resolved tree, echoed into run directories
};

ResolvedConfig resolve_config(const std::string& config_path, const std::vector<std::string>& overrides);

/// Write resolved_config.json and version.txt into a run directory.
void echo_run_metadata(const std::string& out_dir, const nlohmann::json& resolved);

}  // namespace orchid
