#pragma once

#include <string>
#include <vector>

#include "orchidkit/geometry.hpp"
#include "orchidkit/ldm.hpp"
#include "orchidkit/synthdata.hpp"

namespace orchid {

/// Inpainting request: known sample, a pixel mask (true = to be generated),
/// RePaint resampling parameters and an optional tag condition.
struct InpaintTask {
    Sample known;
    BoolMask pixel_mask;
    int resample = 4;     // r: passes per jump anchor
    int jump = 10;        // j: jump length in model steps
    int dilation = 1;     // latent-mask dilation radius in cells
    std::vector<std::string> tags;  // empty = unconditional prior
};

/// A latent cell is masked iff any pixel of its factor x factor block is
/// masked, then dilated by `dilation` cells (Chebyshev radius).
BoolMask derive_latent_mask(const BoolMask& pixel_mask, int downsample, int dilation);

/// Replace to-be-generated pixels with neutral content (gray color, invalid
/// depth, zero normals) before encoding, so stale data inside the mask cannot
/// leak into the known-latent branch through the encoder's receptive field.
Sample neutralize_masked(const Sample& s, const BoolMask& pixel_mask);

/// The known-branch latents exactly as the inpainting procedure encodes them
/// (neutralized sample through the EMA encoder, in model latent units).
DenseArray inpaint_known_latents(const InpaintTask& task, const Denoiser& m, const JointVae& vae);

/// Time plan for RePaint resampling: pairs of (t, down?) where a down entry
/// denoises t -> t-1 and an up entry re-noises t -> t+1. With r = 1 or j = 0
/// the plan is a plain descent from T to 1.
std::vector<std::pair<int, bool>> repaint_plan(int T, int resample, int jump);

struct InpaintResult {
    DenseArray z0;  // model latent units, unmasked cells bitwise equal to the known latents
    DecodedTriple decoded;
    BoolMask latent_mask;
    bool ran_unconditional = false;  // fully-masked task warning flag
};

/// Masked latent resampling over the (un)conditional prior: per reverse step
/// the known branch is forward-noised to t-1, the generated branch takes a
/// stochastic DDPM step, and the two merge under the latent mask; every j
/// steps the merged latent is re-noised back and re-generated r times. At
/// t = 0 the unmasked region is replaced by the exact known latents.
InpaintResult inpaint(const InpaintTask& task, const Denoiser& m, const JointVae& vae,
                      const NoiseSchedule& sched, std::uint64_t seed);

// 8-bit single-channel grayscale PNG mask rasters; value >= 128 means masked.
BoolMask read_mask_png(const std::string& path);
void write_mask_png(const std::string& path, const BoolMask& mask);

}  // namespace orchid
