#pragma once

#include <optional>
#include <string>
#include <vector>

#include "orchidkit/checkpoint.hpp"
#include "orchidkit/geometry.hpp"
#include "orchidkit/nn.hpp"
#include "orchidkit/synthdata.hpp"

namespace orchid {

class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Loss-ledger weights. Defaults follow the reference recipe: color
/// (rec, adv, perceptual, local-disc) = (1, 0.1, 0.1, 1), depth (rec, grad) =
/// (1, 0.5), normal rec = 1, KL 1e-3, distill 1e-6, discriminator gamma 0.1.
struct VaeLossWeights {
    double x_rec = 1.0;
    double x_adv = 0.1;
    double x_lpips = 0.1;
    double x_local = 1.0;
    double d_rec = 1.0;
    double d_grad = 0.5;
    double n_rec = 1.0;
    double kl = 1e-3;
    double distill = 1e-6;
    double gamma = 0.1;
};

struct VaeConfig {
    int latent_channels = 8;
    std::vector<int> stage_widths = {16, 24, 32};  // one width per stride-2 stage
    int blocks_per_stage = 2;
    int image_size = 32;  // training resolution (pins the discriminator MLP)
    double ema_decay = 0.999;
    int lpips_channels = 8;
    int lpips_scales = 3;
    VaeLossWeights weights;

    int in_channels() const { return 7; }  // 3 color + 1 depth + 3 normal
    int downsample() const { return 1 << stage_widths.size(); }
};

struct ResBlock {
    GroupNorm n1, n2;
    Conv2d c1, c2;
    bool projected = false;
    Conv2d skip;  // 1x1 when channel counts differ
    static ResBlock create(ParamSet& ps, const std::string& name, int in_ch, int out_ch,
                           RandomStream& rng);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;
};

struct EncoderNet {
    Conv2d stem;
    std::vector<std::vector<ResBlock>> stages;
    std::vector<Conv2d> downs;
    ResBlock mid;
    GroupNorm out_norm;
    Conv2d out_conv;  // -> 2 * latent_channels
    static EncoderNet create(ParamSet& ps, const VaeConfig& cfg, RandomStream& rng);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x7) const;
};

struct DecoderNet {
    Conv2d stem;
    ResBlock mid;
    std::vector<Conv2d> ups;  // conv after nearest-upsample
    std::vector<std::vector<ResBlock>> stages;
    GroupNorm out_norm;
    Conv2d head_color, head_depth, head_normal;
    static DecoderNet create(ParamSet& ps, const VaeConfig& cfg, RandomStream& rng);
    struct Heads {
        Tape::Id color, depth, normal;  // [3,H,W], [1,H,W], [3,H,W]
    };
    Heads apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id z) const;
};

/// Small ConvNet + MLP producing one real/fake logit per image (color only).
struct DiscNet {
    std::vector<Conv2d> convs;
    Linear fc1, fc2;
    static DiscNet create(ParamSet& ps, const VaeConfig& cfg, RandomStream& rng);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;  // -> [1]
};

/// Fixed random multi-scale conv features standing in for a pretrained
/// perceptual tower; regenerated deterministically from a constant seed.
struct LpipsFilters {
    std::vector<DenseArray> w, b;
    static LpipsFilters create(const VaeConfig& cfg);
};

struct LatentDistribution {
    DenseArray mu;       // [C,h,w]
    DenseArray log_var;  // [C,h,w]
};

struct DecodedTriple {
    DenseArray color;   // [3,H,W] in [0,1]
    DenseArray depth;   // [H,W], >= 0 (model-depth raster)
    DenseArray normal;  // [3,H,W], unit-norm per pixel
};

/// Encoder/decoder/discriminator parameter sets with EMA shadows and a frozen
/// snapshot of the encoder at initialization (the distillation anchor; its
/// depth/normal stem columns are zero so it reads color only).
struct JointVae {
    VaeConfig cfg;
    ParamSet enc, dec, disc;
    ParamSet frozen_enc_star;
    EmaShadow ema_enc, ema_dec;
    EncoderNet enc_net;
    DecoderNet dec_net;
    DiscNet disc_net;
    LpipsFilters lpips;

    static JointVae create(const VaeConfig& cfg, std::uint64_t seed);
};

/// One coupled training example in model space.
struct TrainItem {
    DenseArray color;    // [3,H,W]
    DenseArray d_model;  // [1,H,W] preprocessed inverse depth, 0 where invalid
    DenseArray normal;   // [3,H,W], 0 where invalid
    DenseArray mask;     // [1,H,W] geometry validity as 0/1
    std::size_t valid_count = 0;
    std::optional<DenseArray> mu_star;  // cached distillation anchor latents
};

TrainItem make_train_item(const Sample& s);

// ---- forward paths -------------------------------------------------------

LatentDistribution vae_encode(const JointVae& m, const ParamSet& enc_params, const TrainItem& item);

/// Reparametrized draw z = mu + exp(log_var/2) * xi; log_var clamped to
/// [-30, 20]. Deterministic given the rng state.
std::pair<LatentDistribution, DenseArray> encode_sample(const JointVae& m, const ParamSet& enc_params,
                                                        const TrainItem& item, RandomStream& rng);

DecodedTriple vae_decode(const JointVae& m, const ParamSet& dec_params, const DenseArray& z);

/// Color-only latent from the frozen snapshot encoder (depth/normal inputs
/// zeroed, matching its zeroed stem columns).
DenseArray encode_color_latent(const JointVae& m, const DenseArray& color);

// ---- losses and training --------------------------------------------------

struct VaeLosses {
    // unweighted components
    double rec = 0, adv = 0, lpips = 0, local = 0;
    double d_rec = 0, d_grad = 0, n_rec = 0;
    double kl_raw = 0, distill_raw = 0, disc = 0;
    // weighted composites, named as in the training loop
    double L_x = 0, L_d = 0, L_n = 0, L_kl = 0, L_distill = 0, L_disc = 0;
    double total() const { return L_x + L_d + L_n + L_kl + L_distill; }
};

struct VaeLossGraph {
    Tape::Id enc_obj = -1;   // L_x + L_d + L_n + L_kl + L_distill
    Tape::Id dec_obj = -1;   // L_x + L_d + L_n - gamma * L_disc (live fake)
    Tape::Id disc_obj = -1;  // L_disc with the fake detached
    Tape::Id disc_live = -1;  // batch-averaged L_disc with gradients into the decoder
    std::vector<Tape::Id> latents;  // sampled z per batch item (backward stop points)
    VaeLosses values;
};

VaeLossGraph build_vae_loss_graph(Tape& t, const JointVae& m, const std::vector<Tape::Id>& enc_ids,
                                  const std::vector<Tape::Id>& dec_ids,
                                  const std::vector<Tape::Id>& disc_ids,
                                  const std::vector<TrainItem>& batch, RandomStream& rng);

/// Loss evaluation on frozen parameters (no update).
VaeLosses vae_losses(const JointVae& m, const std::vector<TrainItem>& batch, RandomStream& rng);

struct VaeOptimizers {
    AdamOptimizer enc, dec, disc;
    void init(const JointVae& m, double lr);
};

struct VaeStepReport {
    VaeLosses losses;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
    bool applied = true;  // false when a non-finite gradient rejected the step
};

/// One Alg-style training step: three gradient flows (encoder, decoder,
/// discriminator), Adam updates, EMA shadow update. On non-finite gradients
/// the step is rejected and parameters stay unchanged.
VaeStepReport vae_train_step(JointVae& m, const std::vector<TrainItem>& batch, VaeOptimizers& opt,
                             RandomStream& rng);

/// Cache the frozen-anchor latents for every item (they are constant across
/// training, so computing them once saves an encoder pass per step).
void cache_distill_anchors(const JointVae& m, std::vector<TrainItem>& items);

// ---- evaluation ------------------------------------------------------------

struct VaeEvalReport {
    double psnr_db = 0.0;        // mean over samples of per-sample color PSNR
    double depth_mae = 0.0;      // preprocessed-depth MAE over valid pixels
    double normal_mean_deg = 0.0;
    std::size_t sample_count = 0;
};

/// Reconstruction quality with EMA weights and z = mu (no sampling noise).
VaeEvalReport vae_eval(const JointVae& m, const std::vector<Sample>& samples);

// ---- checkpointing ---------------------------------------------------------

void save_vae(const std::string& path, const JointVae& m);
void load_vae(const std::string& path, JointVae& m);

}  // namespace orchid
