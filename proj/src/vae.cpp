#include "orchidkit/vae.hpp"

#include <chrono>
#include <cmath>

namespace orchid {

namespace {

constexpr std::uint64_t kLpipsSeed = 0x4C504950ull;

void check_spatial(const VaeConfig& cfg, std::size_t h, std::size_t w) {
    std::size_t f = static_cast<std::size_t>(cfg.downsample());
    if (h % f != 0 || w % f != 0)
        throw ShapeError("vae: spatial extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by the downsample factor " + std::to_string(f));
}

Tape::Id item_input(Tape& t, const TrainItem& item) {
    auto x = t.leaf(item.color, "input.color");
    auto d = t.leaf(item.d_model, "input.depth");
    auto n = t.leaf(item.normal, "input.normal");
    return t.concat_channels(t.concat_channels(x, d), n);
}

DenseArray mask2d(const TrainItem& item) {
    DenseArray m = item.mask;
    m.shape = {item.mask.shape[1], item.mask.shape[2]};
    return m;
}

// conservative dyadic mask pyramid: a pooled cell is valid iff all 4 children are
std::vector<DenseArray> mask_pyramid(const DenseArray& mask1hw, int scales) {
    std::vector<DenseArray> out;
    out.push_back(mask1hw);
    for (int s = 1; s < scales; ++s) {
        const DenseArray& prev = out.back();
        std::size_t h = prev.shape[1], w = prev.shape[2];
        if (h < 4 || w < 4 || h % 2 || w % 2) break;
        DenseArray nxt({1, h / 2, w / 2});
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t x = 0; x < w / 2; ++x) {
                double v = prev.at(0, 2 * y, 2 * x) * prev.at(0, 2 * y, 2 * x + 1) *
                           prev.at(0, 2 * y + 1, 2 * x) * prev.at(0, 2 * y + 1, 2 * x + 1);
                nxt.at(0, y, x) = v;
            }
        out.push_back(std::move(nxt));
    }
    return out;
}

DenseArray pair_mask_x(const DenseArray& m) {
    std::size_t h = m.shape[1], w = m.shape[2];
    DenseArray out({1, h, w - 1});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x + 1 < w; ++x) out.at(0, y, x) = m.at(0, y, x) * m.at(0, y, x + 1);
    return out;
}

DenseArray pair_mask_y(const DenseArray& m) {
    std::size_t h = m.shape[1], w = m.shape[2];
    DenseArray out({1, h - 1, w});
    for (std::size_t y = 0; y + 1 < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out.at(0, y, x) = m.at(0, y, x) * m.at(0, y + 1, x);
    return out;
}

double mask_count(const DenseArray& m) {
    double s = 0.0;
    for (double v : m.data) s += v;
    return s;
}

// per-channel 3x3 box filter as a diagonal dense kernel
DenseArray box3_kernel(std::size_t channels) {
    DenseArray k({channels, channels, 3, 3}, 0.0);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < 9; ++i)
            k.data[((c * channels + c) * 9) + i] = 1.0 / 9.0;
    return k;
}

}  // namespace

// ---------------------------------------------------------------------------
// network construction

ResBlock ResBlock::create(ParamSet& ps, const std::string& name, int in_ch, int out_ch,
                          RandomStream& rng) {
    ResBlock b;
    b.n1 = GroupNorm::create(ps, name + ".n1", in_ch, norm_groups(in_ch));
    b.c1 = Conv2d::create(ps, name + ".c1", in_ch, out_ch, 3, 1, 1, rng);
    b.n2 = GroupNorm::create(ps, name + ".n2", out_ch, norm_groups(out_ch));
    b.c2 = Conv2d::create(ps, name + ".c2", out_ch, out_ch, 3, 1, 1, rng);
    if (in_ch != out_ch) {
        b.projected = true;
        b.skip = Conv2d::create(ps, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
    }
    return b;
}

Tape::Id ResBlock::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    auto h = c1.apply(t, p, t.silu(n1.apply(t, p, x)));
    h = c2.apply(t, p, t.silu(n2.apply(t, p, h)));
    auto s = projected ? skip.apply(t, p, x) : x;
    return t.add(h, s);
}

EncoderNet EncoderNet::create(ParamSet& ps, const VaeConfig& cfg, RandomStream& rng) {
    EncoderNet e;
    const auto& w = cfg.stage_widths;
    int S = static_cast<int>(w.size());
    e.stem = Conv2d::create(ps, "stem", cfg.in_channels(), w[0], 3, 1, 1, rng);
    for (int s = 0; s < S; ++s) {
        std::vector<ResBlock> blocks;
        for (int b = 0; b < cfg.blocks_per_stage; ++b)
            blocks.push_back(ResBlock::create(ps, "s" + std::to_string(s) + ".b" + std::to_string(b),
                                              w[s], w[s], rng));
        e.stages.push_back(std::move(blocks));
        int next = w[std::min(s + 1, S - 1)];
        e.downs.push_back(Conv2d::create(ps, "down" + std::to_string(s), w[s], next, 3, 2, 1, rng));
    }
    e.mid = ResBlock::create(ps, "mid", w[S - 1], w[S - 1], rng);
    e.out_norm = GroupNorm::create(ps, "out_norm", w[S - 1], norm_groups(w[S - 1]));
    e.out_conv = Conv2d::create(ps, "out_conv", w[S - 1], 2 * cfg.latent_channels, 3, 1, 1, rng);
    return e;
}

Tape::Id EncoderNet::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x7) const {
    auto x = stem.apply(t, p, x7);
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (const auto& b : stages[s]) x = b.apply(t, p, x);
        x = downs[s].apply(t, p, x);
    }
    x = mid.apply(t, p, x);
    return out_conv.apply(t, p, t.silu(out_norm.apply(t, p, x)));
}

DecoderNet DecoderNet::create(ParamSet& ps, const VaeConfig& cfg, RandomStream& rng) {
    DecoderNet d;
    const auto& w = cfg.stage_widths;
    int S = static_cast<int>(w.size());
    d.stem = Conv2d::create(ps, "stem", cfg.latent_channels, w[S - 1], 3, 1, 1, rng);
    d.mid = ResBlock::create(ps, "mid", w[S - 1], w[S - 1], rng);
    for (int i = 0; i < S; ++i) {
        int s = S - 1 - i;  // target level for this upsample
        int in_ch = i == 0 ? w[S - 1] : w[s + 1];
        d.ups.push_back(Conv2d::create(ps, "up" + std::to_string(i), in_ch, w[s], 3, 1, 1, rng));
        std::vector<ResBlock> blocks;
        for (int b = 0; b < cfg.blocks_per_stage; ++b)
            blocks.push_back(ResBlock::create(ps, "u" + std::to_string(i) + ".b" + std::to_string(b),
                                              w[s], w[s], rng));
        d.stages.push_back(std::move(blocks));
    }
    d.out_norm = GroupNorm::create(ps, "out_norm", w[0], norm_groups(w[0]));
    d.head_color = Conv2d::create(ps, "head_color", w[0], 3, 3, 1, 1, rng);
    d.head_depth = Conv2d::create(ps, "head_depth", w[0], 1, 3, 1, 1, rng);
    d.head_normal = Conv2d::create(ps, "head_normal", w[0], 3, 3, 1, 1, rng);
    return d;
}

DecoderNet::Heads DecoderNet::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id z) const {
    auto x = stem.apply(t, p, z);
    x = mid.apply(t, p, x);
    for (std::size_t i = 0; i < ups.size(); ++i) {
        x = t.upsample_nearest2(x);
        x = ups[i].apply(t, p, x);
        for (const auto& b : stages[i]) x = b.apply(t, p, x);
    }
    auto h = t.silu(out_norm.apply(t, p, x));
    Heads out;
    out.color = t.sigmoid(head_color.apply(t, p, h));
    out.depth = t.softplus(head_depth.apply(t, p, h));
    out.normal = t.unit_normalize_channels(head_normal.apply(t, p, h));
    return out;
}

DiscNet DiscNet::create(ParamSet& ps, const VaeConfig& cfg, RandomStream& rng) {
    if (cfg.image_size % 8 != 0) throw ValueError("DiscNet: image_size must be divisible by 8");
    DiscNet d;
    d.convs.push_back(Conv2d::create(ps, "c0", 3, 16, 3, 2, 1, rng));
    d.convs.push_back(Conv2d::create(ps, "c1", 16, 32, 3, 2, 1, rng));
    d.convs.push_back(Conv2d::create(ps, "c2", 32, 32, 3, 2, 1, rng));
    int spatial = cfg.image_size / 8;
    d.fc1 = Linear::create(ps, "fc1", 32 * spatial * spatial, 64, rng);
    d.fc2 = Linear::create(ps, "fc2", 64, 1, rng);
    return d;
}

Tape::Id DiscNet::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    auto h = x;
    for (const auto& c : convs) h = t.silu(c.apply(t, p, h));
    auto flat = t.reshape(h, {t.value(h).size()});
    return fc2.apply(t, p, t.silu(fc1.apply(t, p, flat)));
}

LpipsFilters LpipsFilters::create(const VaeConfig& cfg) {
    LpipsFilters f;
    RandomStream rng(kLpipsSeed);
    for (int s = 0; s < cfg.lpips_scales; ++s) {
        f.w.push_back(rng.normal_array({static_cast<std::size_t>(cfg.lpips_channels), 3, 3, 3},
                                       1.0 / std::sqrt(27.0)));
        f.b.push_back(DenseArray({static_cast<std::size_t>(cfg.lpips_channels)}, 0.0));
    }
    return f;
}

JointVae JointVae::create(const VaeConfig& cfg, std::uint64_t seed) {
    JointVae m;
    m.cfg = cfg;
    RandomStream rng = RandomStream(seed).split(0xAE);
    m.enc_net = EncoderNet::create(m.enc, cfg, rng);
    m.dec_net = DecoderNet::create(m.dec, cfg, rng);
    m.disc_net = DiscNet::create(m.disc, cfg, rng);
    m.lpips = LpipsFilters::create(cfg);

    // the stand-in for color pretraining: depth/normal stem columns start at
    // zero, and the frozen snapshot keeps them there
    DenseArray& stem_w = m.enc.values[m.enc_net.stem.w];
    std::size_t k2 = stem_w.shape[2] * stem_w.shape[3];
    for (std::size_t co = 0; co < stem_w.shape[0]; ++co)
        for (std::size_t ci = 3; ci < stem_w.shape[1]; ++ci)
            for (std::size_t i = 0; i < k2; ++i) stem_w.data[(co * stem_w.shape[1] + ci) * k2 + i] = 0.0;

    // start the posterior tight (sigma ~ e^-3) so early training is not
    // dominated by reparametrization noise
    DenseArray& head_b = m.enc.values[m.enc_net.out_conv.b];
    for (std::size_t c = static_cast<std::size_t>(cfg.latent_channels); c < head_b.size(); ++c)
        head_b.data[c] = -6.0;

    m.frozen_enc_star = m.enc;
    m.ema_enc.decay = cfg.ema_decay;
    m.ema_dec.decay = cfg.ema_decay;
    m.ema_enc.init(m.enc);
    m.ema_dec.init(m.dec);
    return m;
}

// ---------------------------------------------------------------------------
// data plumbing

TrainItem make_train_item(const Sample& s) {
    TrainItem it;
    it.color = s.color;
    std::size_t h = s.color.shape[1], w = s.color.shape[2];
    ModelDepth md = preprocess_depth(s.depth);
    it.d_model = DenseArray({1, h, w});
    std::copy(md.values.data.begin(), md.values.data.end(), it.d_model.data.begin());
    it.normal = s.normal.vectors;
    BoolMask joint = md.valid.intersect(s.normal.valid);
    it.mask = DenseArray({1, h, w});
    for (std::size_t i = 0; i < h * w; ++i) it.mask.data[i] = joint.m[i] ? 1.0 : 0.0;
    it.valid_count = joint.count();
    return it;
}

// ---------------------------------------------------------------------------
// forward paths

LatentDistribution vae_encode(const JointVae& m, const ParamSet& enc_params, const TrainItem& item) {
    check_spatial(m.cfg, item.color.shape[1], item.color.shape[2]);
    Tape t;
    auto ids = push_params(t, enc_params, false);
    auto out = m.enc_net.apply(t, ids, item_input(t, item));
    std::size_t L = static_cast<std::size_t>(m.cfg.latent_channels);
    LatentDistribution d;
    d.mu = t.value(t.slice_channels(out, 0, L));
    d.log_var = t.value(t.clamp(t.slice_channels(out, L, 2 * L), -30.0, 20.0));
    return d;
}

std::pair<LatentDistribution, DenseArray> encode_sample(const JointVae& m, const ParamSet& enc_params,
                                                        const TrainItem& item, RandomStream& rng) {
    LatentDistribution d = vae_encode(m, enc_params, item);
    DenseArray z = d.mu;
    for (std::size_t i = 0; i < z.size(); ++i)
        z.data[i] += std::exp(0.5 * d.log_var.data[i]) * rng.normal();
    return {std::move(d), std::move(z)};
}

DecodedTriple vae_decode(const JointVae& m, const ParamSet& dec_params, const DenseArray& z) {
    if (z.rank() != 3 || z.shape[0] != static_cast<std::size_t>(m.cfg.latent_channels))
        throw ShapeError("vae_decode: latent must be [" + std::to_string(m.cfg.latent_channels) +
                         ",h,w], got " + z.shape_string());
    Tape t;
    auto ids = push_params(t, dec_params, false);
    auto heads = m.dec_net.apply(t, ids, t.leaf(z));
    DecodedTriple out;
    out.color = t.value(heads.color);
    DenseArray d1 = t.value(heads.depth);
    out.depth = DenseArray({d1.shape[1], d1.shape[2]});
    out.depth.data = d1.data;
    out.normal = t.value(heads.normal);
    return out;
}

DenseArray encode_color_latent(const JointVae& m, const DenseArray& color) {
    if (color.rank() != 3 || color.shape[0] != 3)
        throw ShapeError("encode_color_latent: color must be [3,H,W]");
    TrainItem it;
    it.color = color;
    it.d_model = DenseArray({1, color.shape[1], color.shape[2]}, 0.0);
    it.normal = DenseArray({3, color.shape[1], color.shape[2]}, 0.0);
    it.mask = DenseArray({1, color.shape[1], color.shape[2]}, 0.0);
    return vae_encode(m, m.frozen_enc_star, it).mu;
}

void cache_distill_anchors(const JointVae& m, std::vector<TrainItem>& items) {
    for (auto& it : items)
        if (!it.mu_star) it.mu_star = vae_encode(m, m.frozen_enc_star, it).mu;
}

// ---------------------------------------------------------------------------
// losses

VaeLossGraph build_vae_loss_graph(Tape& t, const JointVae& m, const std::vector<Tape::Id>& enc_ids,
                                  const std::vector<Tape::Id>& dec_ids,
                                  const std::vector<Tape::Id>& disc_ids,
                                  const std::vector<TrainItem>& batch, RandomStream& rng) {
    if (batch.empty()) throw TrainError("vae_losses: empty batch");
    const auto& wts = m.cfg.weights;
    std::size_t L = static_cast<std::size_t>(m.cfg.latent_channels);

    Tape::Id rec = -1, adv = -1, lpips = -1, local = -1;
    Tape::Id d_rec = -1, d_grad = -1, n_rec = -1, kl = -1, distill = -1;
    Tape::Id disc_live = -1, disc_det = -1;
    std::vector<Tape::Id> g_latents;
    auto acc = [&](Tape::Id& slot, Tape::Id v) { slot = slot < 0 ? v : t.add(slot, v); };

    for (const auto& item : batch) {
        check_spatial(m.cfg, item.color.shape[1], item.color.shape[2]);
        if (item.valid_count == 0) throw TrainError("vae_losses: item has no valid geometry pixels");

        auto x = t.leaf(item.color, "input.color");
        auto dm = t.leaf(item.d_model, "input.depth");
        auto nm = t.leaf(item.normal, "input.normal");
        auto x7 = t.concat_channels(t.concat_channels(x, dm), nm);

        auto enc_out = m.enc_net.apply(t, enc_ids, x7);
        auto mu = t.slice_channels(enc_out, 0, L);
        auto lv = t.clamp(t.slice_channels(enc_out, L, 2 * L), -30.0, 20.0);
        auto xi = t.leaf(rng.normal_array(t.value(mu).shape), "noise");
        auto z = t.add(mu, t.mul(t.exponential(t.scale(lv, 0.5)), xi));
        g_latents.push_back(z);
        auto heads = m.dec_net.apply(t, dec_ids, z);

        // color reconstruction: mean over pixels of the channelwise L2 norm
        auto diff = t.sub(heads.color, x);
        acc(rec, t.mean(t.pixel_norm(diff)));

        // perceptual distance on the fixed random feature pyramid
        Tape::Id lp = -1;
        auto xs = x;
        auto rs = heads.color;
        for (int s = 0; s < m.cfg.lpips_scales; ++s) {
            auto wk = t.leaf(m.lpips.w[s], "lpips.w");
            auto bk = t.leaf(m.lpips.b[s], "lpips.b");
            auto fx = t.silu(t.conv2d(xs, wk, bk, 1, 1));
            auto fr = t.silu(t.conv2d(rs, wk, bk, 1, 1));
            auto term = t.mean(t.pixel_norm(t.sub(fr, fx)));
            lp = lp < 0 ? term : t.add(lp, term);
            if (s + 1 < m.cfg.lpips_scales) {
                if (t.value(xs).shape[1] < 4 || t.value(xs).shape[2] < 4) break;
                xs = t.avg_pool2(xs);
                rs = t.avg_pool2(rs);
            }
        }
        acc(lpips, t.scale(lp, 1.0 / m.cfg.lpips_scales));

        // residual-variance-weighted L1 (locally-discriminative surrogate)
        auto kbox = t.leaf(box3_kernel(3), "box3.w");
        auto zb = t.leaf(DenseArray({3}, 0.0), "box3.b");
        auto m1 = t.conv2d(diff, kbox, zb, 1, 1);
        auto m2 = t.conv2d(t.square(diff), kbox, zb, 1, 1);
        auto var3 = t.sub(m2, t.square(m1));
        acc(local, t.mean(t.mul(var3, t.abs(diff))));

        // adversarial pieces
        auto l_real = m.disc_net.apply(t, disc_ids, x);
        auto l_fake = m.disc_net.apply(t, disc_ids, heads.color);
        auto l_fake_det = m.disc_net.apply(t, disc_ids, t.detach(heads.color));
        acc(adv, t.softplus(t.neg(l_fake)));
        acc(disc_live, t.add(t.softplus(t.neg(l_real)), t.softplus(l_fake)));
        acc(disc_det, t.add(t.softplus(t.neg(l_real)), t.softplus(l_fake_det)));

        // depth: masked L1 plus multi-resolution gradient of the residual
        auto mk = t.leaf(item.mask, "mask");
        double inv_cnt = 1.0 / static_cast<double>(item.valid_count);
        auto dres = t.mul(t.sub(heads.depth, dm), mk);
        acc(d_rec, t.scale(t.sum(t.abs(dres)), inv_cnt));

        auto pyr = mask_pyramid(item.mask, 4);
        Tape::Id gterm = -1;
        auto r = dres;
        for (std::size_t s = 0; s < pyr.size(); ++s) {
            if (s > 0) r = t.avg_pool2(r);
            DenseArray mx = pair_mask_x(pyr[s]);
            DenseArray my = pair_mask_y(pyr[s]);
            double cnt = mask_count(mx) + mask_count(my);
            if (cnt < 1.0) continue;
            auto gx = t.sum(t.abs(t.mul(t.spatial_diff_x(r), t.leaf(mx))));
            auto gy = t.sum(t.abs(t.mul(t.spatial_diff_y(r), t.leaf(my))));
            auto term = t.scale(t.add(gx, gy), 1.0 / cnt);
            gterm = gterm < 0 ? term : t.add(gterm, term);
        }
        acc(d_grad, gterm < 0 ? t.leaf(DenseArray::scalar(0.0)) : t.scale(gterm, 1.0 / pyr.size()));

        // normal reconstruction: masked mean of channelwise L2
        auto ndiff = t.pixel_norm(t.sub(heads.normal, nm));
        acc(n_rec, t.scale(t.sum(t.mul(ndiff, t.leaf(mask2d(item)))), inv_cnt));

        // closed-form KL against the unit-variance prior, mean over latents
        auto klsum = t.add(t.square(mu), t.exponential(lv));
        klsum = t.sub(t.add_scalar(klsum, -1.0), lv);
        acc(kl, t.scale(t.mean(klsum), 0.5));

        // distillation anchor
        DenseArray anchor = item.mu_star ? *item.mu_star : vae_encode(m, m.frozen_enc_star, item).mu;
        acc(distill, t.mean(t.abs(t.sub(t.leaf(anchor, "mu_star"), mu))));
    }

    double inv_b = 1.0 / static_cast<double>(batch.size());
    auto avg = [&](Tape::Id v) { return t.scale(v, inv_b); };
    rec = avg(rec);
    adv = avg(adv);
    lpips = avg(lpips);
    local = avg(local);
    d_rec = avg(d_rec);
    d_grad = avg(d_grad);
    n_rec = avg(n_rec);
    kl = avg(kl);
    distill = avg(distill);
    disc_live = avg(disc_live);
    disc_det = avg(disc_det);

    auto weighted = [&](Tape::Id a, double wa, Tape::Id b, double wb) {
        return t.add(t.scale(a, wa), t.scale(b, wb));
    };
    auto L_x = t.add(weighted(rec, wts.x_rec, adv, wts.x_adv),
                     weighted(lpips, wts.x_lpips, local, wts.x_local));
    auto L_d = weighted(d_rec, wts.d_rec, d_grad, wts.d_grad);
    auto L_n = t.scale(n_rec, wts.n_rec);
    auto L_kl = t.scale(kl, wts.kl);
    auto L_distill = t.scale(distill, wts.distill);
    auto recon = t.add(t.add(L_x, L_d), L_n);

    VaeLossGraph g;
    g.enc_obj = t.add(recon, t.add(L_kl, L_distill));
    g.dec_obj = t.add(recon, t.scale(disc_live, -wts.gamma));
    g.disc_obj = disc_det;
    g.disc_live = disc_live;
    g.latents = std::move(g_latents);

    auto val = [&](Tape::Id id) { return t.value(id).data[0]; };
    g.values.rec = val(rec);
    g.values.adv = val(adv);
    g.values.lpips = val(lpips);
    g.values.local = val(local);
    g.values.d_rec = val(d_rec);
    g.values.d_grad = val(d_grad);
    g.values.n_rec = val(n_rec);
    g.values.kl_raw = val(kl);
    g.values.distill_raw = val(distill);
    g.values.disc = val(disc_det);
    g.values.L_x = val(L_x);
    g.values.L_d = val(L_d);
    g.values.L_n = val(L_n);
    g.values.L_kl = val(L_kl);
    g.values.L_distill = val(L_distill);
    g.values.L_disc = val(disc_det);

    const struct {
        const char* name;
        double v;
    } named[] = {{"L_x", g.values.L_x},       {"L_d", g.values.L_d},
                 {"L_n", g.values.L_n},       {"L_KL", g.values.L_kl},
                 {"L_distill", g.values.L_distill}, {"L_disc", g.values.L_disc}};
    for (const auto& nv : named)
        if (!std::isfinite(nv.v)) throw TrainError(std::string("vae_losses: non-finite loss ") + nv.name);
    return g;
}

VaeLosses vae_losses(const JointVae& m, const std::vector<TrainItem>& batch, RandomStream& rng) {
    Tape t;
    auto enc_ids = push_params(t, m.enc, false);
    auto dec_ids = push_params(t, m.dec, false);
    auto disc_ids = push_params(t, m.disc, false);
    return build_vae_loss_graph(t, m, enc_ids, dec_ids, disc_ids, batch, rng).values;
}

void VaeOptimizers::init(const JointVae& m, double lr) {
    enc.cfg.lr = dec.cfg.lr = disc.cfg.lr = lr;
    enc.init(m.enc);
    dec.init(m.dec);
    disc.init(m.disc);
}

VaeStepReport vae_train_step(JointVae& m, const std::vector<TrainItem>& batch, VaeOptimizers& opt,
                             RandomStream& rng) {
    auto t0 = std::chrono::steady_clock::now();
    VaeStepReport rep;
    Tape t;
    auto enc_ids = push_params(t, m.enc);
    auto dec_ids = push_params(t, m.dec);
    auto disc_ids = push_params(t, m.disc);
    try {
        auto g = build_vae_loss_graph(t, m, enc_ids, dec_ids, disc_ids, batch, rng);
        rep.losses = g.values;

        // one sweep from enc_obj serves both flows: KL/distill never touch the
        // decoder, so its adjoints there equal the reconstruction gradient
        std::vector<Tape::Id> enc_dec_ids = enc_ids;
        enc_dec_ids.insert(enc_dec_ids.end(), dec_ids.begin(), dec_ids.end());
        auto combined = t.gradients(g.enc_obj, enc_dec_ids);
        std::vector<DenseArray> grads_enc(combined.begin(), combined.begin() + enc_ids.size());
        std::vector<DenseArray> grads_dec(combined.begin() + enc_ids.size(), combined.end());
        // the decoder's adversarial term; the sweep stops at the latents so it
        // never wanders into the encoder
        auto grads_adv = t.gradients(g.disc_live, dec_ids, g.latents);
        for (std::size_t i = 0; i < grads_dec.size(); ++i)
            axpy(grads_dec[i], -m.cfg.weights.gamma, grads_adv[i]);
        auto grads_disc = t.gradients(g.disc_obj, disc_ids);

        auto finite = [](const std::vector<DenseArray>& gs) {
            for (const auto& g : gs)
                if (!g.all_finite()) return false;
            return true;
        };
        if (!finite(grads_enc) || !finite(grads_dec) || !finite(grads_disc)) {
            rep.applied = false;
            return rep;
        }
        double n2 = 0.0;
        for (const auto* gs : {&grads_enc, &grads_dec, &grads_disc})
            for (const auto& g : *gs)
                for (double v : g.data) n2 += v * v;
        rep.grad_norm = std::sqrt(n2);

        opt.enc.step(m.enc, grads_enc);
        opt.dec.step(m.dec, grads_dec);
        opt.disc.step(m.disc, grads_disc);
        m.ema_enc.update_ramped(m.enc);
        m.ema_dec.update_ramped(m.dec);
    } catch (const GradientError&) {
        rep.applied = false;
    }
    rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

// ---------------------------------------------------------------------------
// evaluation

VaeEvalReport vae_eval(const JointVae& m, const std::vector<Sample>& samples) {
    if (samples.empty()) throw TrainError("vae_eval: no samples");
    ParamSet enc = m.ema_enc.snapshot(m.enc);
    ParamSet dec = m.ema_dec.snapshot(m.dec);
    VaeEvalReport r;
    double psnr_sum = 0.0, mae_sum = 0.0, ang_sum = 0.0;
    for (const auto& s : samples) {
        TrainItem it = make_train_item(s);
        LatentDistribution d = vae_encode(m, enc, it);
        DecodedTriple dec_out = vae_decode(m, dec, d.mu);

        double mse = 0.0;
        for (std::size_t i = 0; i < s.color.size(); ++i) {
            double e = dec_out.color.data[i] - s.color.data[i];
            mse += e * e;
        }
        mse /= static_cast<double>(s.color.size());
        psnr_sum += 10.0 * std::log10(1.0 / std::max(mse, 1e-12));

        double mae = 0.0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < it.d_model.size(); ++i) {
            if (it.mask.data[i] == 0.0) continue;
            mae += std::abs(dec_out.depth.data[i] - it.d_model.data[i]);
            ++n;
        }
        mae_sum += mae / std::max<std::size_t>(1, n);

        double ang = 0.0;
        std::size_t an = 0;
        std::size_t plane = s.color.shape[1] * s.color.shape[2];
        for (std::size_t i = 0; i < plane; ++i) {
            if (it.mask.data[i] == 0.0) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < 3; ++c)
                dot += dec_out.normal.data[c * plane + i] * s.normal.vectors.data[c * plane + i];
            dot = std::min(1.0, std::max(-1.0, dot));
            ang += std::acos(dot) * 57.29577951308232;
            ++an;
        }
        ang_sum += ang / std::max<std::size_t>(1, an);
    }
    r.sample_count = samples.size();
    r.psnr_db = psnr_sum / static_cast<double>(samples.size());
    r.depth_mae = mae_sum / static_cast<double>(samples.size());
    r.normal_mean_deg = ang_sum / static_cast<double>(samples.size());
    return r;
}

// ---------------------------------------------------------------------------
// checkpointing

void save_vae(const std::string& path, const JointVae& m) {
    ParamSet all;
    merge_prefixed(all, "enc", m.enc);
    merge_prefixed(all, "dec", m.dec);
    merge_prefixed(all, "disc", m.disc);
    merge_prefixed(all, "star", m.frozen_enc_star);
    merge_prefixed(all, "ema_enc", m.ema_enc.snapshot(m.enc));
    merge_prefixed(all, "ema_dec", m.ema_dec.snapshot(m.dec));
    write_checkpoint(path, all);
}

void load_vae(const std::string& path, JointVae& m) {
    ParamSet all = read_checkpoint(path);
    load_values(m.enc, extract_prefixed(all, "enc"));
    load_values(m.dec, extract_prefixed(all, "dec"));
    load_values(m.disc, extract_prefixed(all, "disc"));
    load_values(m.frozen_enc_star, extract_prefixed(all, "star"));
    ParamSet ema_e = m.ema_enc.snapshot(m.enc);
    load_values(ema_e, extract_prefixed(all, "ema_enc"));
    m.ema_enc.values = ema_e.values;
    ParamSet ema_d = m.ema_dec.snapshot(m.dec);
    load_values(ema_d, extract_prefixed(all, "ema_dec"));
    m.ema_dec.values = ema_d.values;
}

}  // namespace orchid
