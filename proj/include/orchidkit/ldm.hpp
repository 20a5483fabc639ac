#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "orchidkit/nn.hpp"
#include "orchidkit/schedule.hpp"
#include "orchidkit/vae.hpp"

namespace orchid {

struct DenoiserConfig {
    int latent_channels = 8;
    int cond_latent_channels = 0;  // 8 when conditioning on a color latent
    int base_width = 32;
    int temb_dim = 64;
    int emb_dim = 128;
    int T = 1000;
    std::vector<std::string> vocabulary;  // tag-condition vocabulary

    int in_channels() const { return latent_channels + cond_latent_channels; }
};

/// Conditioning signal for the denoiser.
struct Condition {
    enum class Kind { None, Tags, ColorLatent };
    Kind kind = Kind::None;
    std::vector<std::string> tags;
    DenseArray color_latent;  // [C,h,w], already scaled to the model's latent units

    static Condition none() { return Condition{}; }
    static Condition with_tags(std::vector<std::string> t) {
        Condition c;
        c.kind = Kind::Tags;
        c.tags = std::move(t);
        return c;
    }
    static Condition with_color_latent(DenseArray z) {
        Condition c;
        c.kind = Kind::ColorLatent;
        c.color_latent = std::move(z);
        return c;
    }
};

/// Residual block with scale-shift time modulation: the embedding controls a
/// per-channel gain and bias after the second norm, which lets the network
/// realize the strongly t-dependent input gain that v-prediction requires.
struct TimeResBlock {
    GroupNorm n1, n2;
    Conv2d c1, c2;
    Linear emb_gain, emb_bias;
    bool projected = false;
    Conv2d skip;
    static TimeResBlock create(ParamSet& ps, const std::string& name, int in_ch, int out_ch,
                               int emb_dim, RandomStream& rng);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x, Tape::Id emb) const;
};

struct SelfAttention {
    GroupNorm norm;
    Linear q, k, v, o;
    static SelfAttention create(ParamSet& ps, const std::string& name, int channels, RandomStream& rng);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;
};

/// Time-and-condition-conditioned UNet over joint latents: two resolutions,
/// residual blocks modulated by the embedding, one self-attention block at the
/// lowest resolution. Output is the v-prediction.
struct DenoiserNet {
    Conv2d conv_in;
    Linear temb1, temb2;
    std::size_t cond_table = 0;  // [vocab+1, emb_dim]; last row is the null condition
    TimeResBlock down1, down2;
    Conv2d down_conv;
    TimeResBlock mid1, mid2;
    SelfAttention mid_attn;
    Conv2d up_conv;
    TimeResBlock up1, up2;
    GroupNorm out_norm;
    Conv2d conv_out;
    static DenoiserNet create(ParamSet& ps, const DenoiserConfig& cfg, RandomStream& rng);
};

struct Denoiser {
    DenoiserConfig cfg;
    ParamSet params;
    DenoiserNet net;
    double latent_scale = 1.0;  // RMS normalizer applied to VAE latents
    double cond_scale = 1.0;    // RMS normalizer applied to color-latent conditions
    std::unordered_map<std::string, std::size_t> vocab_index;

    static Denoiser create(const DenoiserConfig& cfg, std::uint64_t seed);

    std::size_t null_row() const { return cfg.vocabulary.size(); }
    /// Vocabulary rows for a condition; None and empty tag lists route to the
    /// null embedding row. Unknown tags are rejected with a diagnostic.
    std::vector<std::size_t> condition_rows(const Condition& c) const;
};

/// Forward denoise on frozen parameters: f(z_t, t; cond) -> v.
DenseArray denoise(const Denoiser& m, const DenseArray& z_t, int t, const Condition& cond);

/// Graph-building flavor used by the training step.
Tape::Id apply_denoiser(Tape& t, const Denoiser& m, const std::vector<Tape::Id>& p, Tape::Id z_in,
                        int step, const std::vector<std::size_t>& cond_rows,
                        const std::optional<DenseArray>& cond_latent);

struct LdmBatchItem {
    DenseArray z0;  // [C,h,w], already in model latent units
    Condition cond;
};

/// Optional pre-drawn randomness for a training step (test seam).
struct LdmBatchPlan {
    std::vector<int> t;
    std::vector<DenseArray> eps;
    std::vector<bool> drop;
};

struct LdmStepReport {
    double loss = 0.0;
    std::size_t null_cond_count = 0;
    bool applied = true;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

/// One denoising-score step: t ~ U[1,T], eps ~ N(0,I), v-target regression,
/// condition dropout with probability p_drop (enables guidance).
LdmStepReport ldm_train_step(Denoiser& m, const std::vector<LdmBatchItem>& batch,
                             const NoiseSchedule& sched, AdamOptimizer& opt, RandomStream& rng,
                             double p_drop, const LdmBatchPlan* plan = nullptr);

/// v-target for (z0, eps) at step t: sqrt(ab) eps - sqrt(1-ab) z0.
DenseArray v_target(const DenseArray& z0, const DenseArray& eps, int t, const NoiseSchedule& s);

/// Classifier-free guidance combine; w = 1 and w = 0 return the conditional /
/// unconditional branch exactly.
DenseArray guided_v(const DenseArray& v_uncond, const DenseArray& v_cond, double w);

struct SampleResult {
    DenseArray z0;  // model units
    DecodedTriple decoded;
};

struct SamplerOptions {
    int steps = 100;
    double guidance = 3.0;
    bool ddpm = false;  // ancestral sampling instead of DDIM
};

/// Text(tag)-conditioned generation with classifier-free guidance, decoded by
/// the joint VAE (EMA weights).
SampleResult sample_text(const Denoiser& m, const JointVae& vae, const NoiseSchedule& sched,
                         const std::vector<std::string>& tags, const SamplerOptions& opts,
                         std::uint64_t seed, std::size_t latent_h, std::size_t latent_w);

struct GeometryPrediction {
    DenseArray depth;  // [H,W] model-depth raster
    NormalMap normal;
    DenseArray color_latent;  // the condition actually used, model units
};

/// Color-conditioned depth/normal prediction: the color latent rides along as
/// a constant (noise-free) condition at every step; text conditions dropped.
GeometryPrediction predict_geometry(const Denoiser& m, const JointVae& vae,
                                    const NoiseSchedule& sched, const DenseArray& color, int steps,
                                    std::uint64_t seed, bool ddpm = false);

/// Unconditional / tag-conditioned ancestral DDPM trajectory over the full
/// schedule. Consumes the generation RNG stream exactly like inpainting does.
DenseArray sample_latent_ddpm(const Denoiser& m, const NoiseSchedule& sched, const Condition& cond,
                              std::uint64_t seed, std::size_t latent_h, std::size_t latent_w);

/// Fit the RMS latent normalizers from encoded dataset latents.
double rms_scale(const std::vector<DenseArray>& latents);

/// Zero-pad the input conv of a text-conditioned model to accept a color
/// latent (extra input channels start at zero, so at initialization the
/// finetuned model reproduces the text model under a null condition).
Denoiser finetune_from_text_model(const Denoiser& text_model, std::uint64_t seed);

void save_denoiser(const std::string& path, const Denoiser& m);
void load_denoiser(const std::string& path, Denoiser& m);

}  // namespace orchid
