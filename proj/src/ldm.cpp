#include "orchidkit/ldm.hpp"

#include <chrono>
#include <cmath>

namespace orchid {

namespace {

void check_latent(const Denoiser& m, const DenseArray& z) {
    if (z.rank() != 3 || z.shape[0] != static_cast<std::size_t>(m.cfg.latent_channels))
        throw ShapeError("denoise: latent must be [" + std::to_string(m.cfg.latent_channels) +
                         ",h,w], got " + z.shape_string());
    if (z.shape[1] < 2 || z.shape[2] < 2 || z.shape[1] % 2 || z.shape[2] % 2)
        throw ShapeError("denoise: latent extents must be even and >= 2");
}

}  // namespace

TimeResBlock TimeResBlock::create(ParamSet& ps, const std::string& name, int in_ch, int out_ch,
                                  int emb_dim, RandomStream& rng) {
    TimeResBlock b;
    b.n1 = GroupNorm::create(ps, name + ".n1", in_ch, norm_groups(in_ch));
    b.c1 = Conv2d::create(ps, name + ".c1", in_ch, out_ch, 3, 1, 1, rng);
    b.emb_gain = Linear::create(ps, name + ".emb_g", emb_dim, out_ch, rng);
    b.emb_bias = Linear::create(ps, name + ".emb_b", emb_dim, out_ch, rng);
    b.n2 = GroupNorm::create(ps, name + ".n2", out_ch, norm_groups(out_ch));
    b.c2 = Conv2d::create(ps, name + ".c2", out_ch, out_ch, 3, 1, 1, rng);
    if (in_ch != out_ch) {
        b.projected = true;
        b.skip = Conv2d::create(ps, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
    }
    return b;
}

Tape::Id TimeResBlock::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x, Tape::Id emb) const {
    auto h = c1.apply(t, p, t.silu(n1.apply(t, p, x)));
    auto e = t.silu(emb);
    h = t.affine_channel(n2.apply(t, p, h), emb_gain.apply(t, p, e), emb_bias.apply(t, p, e));
    h = c2.apply(t, p, t.silu(h));
    auto s = projected ? skip.apply(t, p, x) : x;
    return t.add(h, s);
}

SelfAttention SelfAttention::create(ParamSet& ps, const std::string& name, int channels,
                                    RandomStream& rng) {
    SelfAttention a;
    a.norm = GroupNorm::create(ps, name + ".norm", channels, norm_groups(channels));
    a.q = Linear::create(ps, name + ".q", channels, channels, rng);
    a.k = Linear::create(ps, name + ".k", channels, channels, rng);
    a.v = Linear::create(ps, name + ".v", channels, channels, rng);
    a.o = Linear::create(ps, name + ".o", channels, channels, rng);
    return a;
}

Tape::Id SelfAttention::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    const DenseArray& vx = t.value(x);
    std::size_t c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    auto xn = norm.apply(t, p, x);
    auto tokens = t.transpose2(t.reshape(xn, {c, h * w}));  // [N, C]
    auto Q = q.apply(t, p, tokens);
    auto K = k.apply(t, p, tokens);
    auto V = v.apply(t, p, tokens);
    auto A = t.softmax_rows(t.scale(t.matmul(Q, t.transpose2(K)), 1.0 / std::sqrt(static_cast<double>(c))));
    auto Y = o.apply(t, p, t.matmul(A, V));
    auto back = t.reshape(t.transpose2(Y), {c, h, w});
    return t.add(x, back);
}

DenoiserNet DenoiserNet::create(ParamSet& ps, const DenoiserConfig& cfg, RandomStream& rng) {
    DenoiserNet n;
    int w = cfg.base_width;
    n.conv_in = Conv2d::create(ps, "conv_in", cfg.in_channels(), w, 3, 1, 1, rng);
    n.temb1 = Linear::create(ps, "temb1", cfg.temb_dim, cfg.emb_dim, rng);
    n.temb2 = Linear::create(ps, "temb2", cfg.emb_dim, cfg.emb_dim, rng);
    n.cond_table =
        ps.add("cond.table", rng.normal_array({cfg.vocabulary.size() + 1,
                                               static_cast<std::size_t>(cfg.emb_dim)},
                                              0.02));
    n.down1 = TimeResBlock::create(ps, "down1", w, w, cfg.emb_dim, rng);
    n.down2 = TimeResBlock::create(ps, "down2", w, w, cfg.emb_dim, rng);
    n.down_conv = Conv2d::create(ps, "down_conv", w, 2 * w, 3, 2, 1, rng);
    n.mid1 = TimeResBlock::create(ps, "mid1", 2 * w, 2 * w, cfg.emb_dim, rng);
    n.mid_attn = SelfAttention::create(ps, "mid_attn", 2 * w, rng);
    n.mid2 = TimeResBlock::create(ps, "mid2", 2 * w, 2 * w, cfg.emb_dim, rng);
    n.up_conv = Conv2d::create(ps, "up_conv", 2 * w, w, 3, 1, 1, rng);
    n.up1 = TimeResBlock::create(ps, "up1", 2 * w, w, cfg.emb_dim, rng);
    n.up2 = TimeResBlock::create(ps, "up2", w, w, cfg.emb_dim, rng);
    n.out_norm = GroupNorm::create(ps, "out_norm", w, norm_groups(w));
    n.conv_out = Conv2d::create(ps, "conv_out", w, cfg.latent_channels, 3, 1, 1, rng);
    ps.values[n.conv_out.w].fill(0.0);  // start from the zero prediction
    return n;
}

Denoiser Denoiser::create(const DenoiserConfig& cfg, std::uint64_t seed) {
    Denoiser m;
    m.cfg = cfg;
    RandomStream rng = RandomStream(seed).split(0x1D);
    m.net = DenoiserNet::create(m.params, cfg, rng);
    for (std::size_t i = 0; i < cfg.vocabulary.size(); ++i) m.vocab_index[cfg.vocabulary[i]] = i;
    return m;
}

std::vector<std::size_t> Denoiser::condition_rows(const Condition& c) const {
    if (c.kind == Condition::Kind::Tags && !c.tags.empty()) {
        std::vector<std::size_t> rows;
        for (const auto& tag : c.tags) {
            auto it = vocab_index.find(tag);
            if (it == vocab_index.end()) {
                std::string vocab;
                for (const auto& v : cfg.vocabulary) vocab += (vocab.empty() ? "" : ", ") + v;
                throw ValueError("unknown tag '" + tag + "'; vocabulary: " + vocab);
            }
            rows.push_back(it->second);
        }
        return rows;
    }
    return {null_row()};
}

Tape::Id apply_denoiser(Tape& t, const Denoiser& m, const std::vector<Tape::Id>& p, Tape::Id z_in,
                        int step, const std::vector<std::size_t>& cond_rows,
                        const std::optional<DenseArray>& cond_latent) {
    const DenoiserNet& n = m.net;
    Tape::Id x = z_in;
    if (m.cfg.cond_latent_channels > 0) {
        if (!cond_latent)
            throw ValueError("denoise: model expects a color-latent condition");
        const DenseArray& vz = t.value(z_in);
        if (cond_latent->rank() != 3 ||
            cond_latent->shape[0] != static_cast<std::size_t>(m.cfg.cond_latent_channels) ||
            cond_latent->shape[1] != vz.shape[1] || cond_latent->shape[2] != vz.shape[2])
            throw ShapeError("denoise: condition latent " + cond_latent->shape_string() +
                             " not congruent with diffusion latent " + vz.shape_string());
        x = t.concat_channels(z_in, t.leaf(*cond_latent, "cond_latent"));
    } else if (cond_latent) {
        throw ValueError("denoise: model is not color-latent conditioned");
    }

    auto te = t.leaf(sinusoidal_time_embed(step, m.cfg.temb_dim, m.cfg.T), "time_embed");
    auto emb = n.temb2.apply(t, p, t.silu(n.temb1.apply(t, p, te)));
    emb = t.add(emb, t.rows_sum(p[n.cond_table], cond_rows));

    auto h0 = n.conv_in.apply(t, p, x);
    auto h1 = n.down1.apply(t, p, h0, emb);
    auto h2 = n.down2.apply(t, p, h1, emb);
    auto d = n.down_conv.apply(t, p, h2);
    auto mid = n.mid1.apply(t, p, d, emb);
    mid = n.mid_attn.apply(t, p, mid);
    mid = n.mid2.apply(t, p, mid, emb);
    auto u = n.up_conv.apply(t, p, t.upsample_nearest2(mid));
    u = n.up1.apply(t, p, t.concat_channels(u, h2), emb);
    u = n.up2.apply(t, p, u, emb);
    return n.conv_out.apply(t, p, t.silu(n.out_norm.apply(t, p, u)));
}

DenseArray denoise(const Denoiser& m, const DenseArray& z_t, int t, const Condition& cond) {
    check_latent(m, z_t);
    if (t < 1 || t > m.cfg.T)
        throw ValueError("denoise: step " + std::to_string(t) + " out of [1," +
                         std::to_string(m.cfg.T) + "]");
    Tape tape;
    auto p = push_params(tape, m.params, false);
    std::optional<DenseArray> cl;
    if (cond.kind == Condition::Kind::ColorLatent) cl = cond.color_latent;
    auto out = apply_denoiser(tape, m, p, tape.leaf(z_t, "z_t"), t, m.condition_rows(cond), cl);
    return tape.value(out);
}

DenseArray v_target(const DenseArray& z0, const DenseArray& eps, int t, const NoiseSchedule& s) {
    require_same_shape(z0, eps, "v_target");
    double ab = s.alpha_bar_at(t);
    double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    DenseArray v(z0.shape);
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] = a * eps.data[i] - b * z0.data[i];
    return v;
}

DenseArray guided_v(const DenseArray& v_uncond, const DenseArray& v_cond, double w) {
    if (w == 1.0) return v_cond;
    if (w == 0.0) return v_uncond;
    require_same_shape(v_uncond, v_cond, "guided_v");
    DenseArray out(v_cond.shape);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = v_uncond.data[i] + w * (v_cond.data[i] - v_uncond.data[i]);
    return out;
}

LdmStepReport ldm_train_step(Denoiser& m, const std::vector<LdmBatchItem>& batch,
                             const NoiseSchedule& sched, AdamOptimizer& opt, RandomStream& rng,
                             double p_drop, const LdmBatchPlan* plan) {
    auto t0 = std::chrono::steady_clock::now();
    if (batch.empty()) throw TrainError("ldm_train_step: empty batch");
    if (sched.T != m.cfg.T) throw TrainError("ldm_train_step: schedule T differs from model T");
    LdmStepReport rep;
    Tape tape;
    auto p = push_params(tape, m.params);
    Tape::Id loss = -1;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& item = batch[i];
        check_latent(m, item.z0);
        int step = plan ? plan->t[i] : static_cast<int>(rng.uniform_int(1, m.cfg.T));
        DenseArray eps = plan ? plan->eps[i] : rng.normal_array(item.z0.shape);
        bool drop = plan ? static_cast<bool>(plan->drop[i]) : (p_drop > 0.0 && rng.uniform() < p_drop);

        std::vector<std::size_t> rows = drop ? std::vector<std::size_t>{m.null_row()}
                                             : m.condition_rows(item.cond);
        if (rows.size() == 1 && rows[0] == m.null_row()) ++rep.null_cond_count;

        std::optional<DenseArray> cl;
        if (m.cfg.cond_latent_channels > 0) {
            if (drop || item.cond.kind != Condition::Kind::ColorLatent)
                cl = DenseArray({static_cast<std::size_t>(m.cfg.cond_latent_channels),
                                 item.z0.shape[1], item.z0.shape[2]},
                                0.0);
            else
                cl = item.cond.color_latent;
        }

        DenseArray z_t = forward_noise(item.z0, step, eps, sched);
        DenseArray y = v_target(item.z0, eps, step, sched);
        auto pred = apply_denoiser(tape, m, p, tape.leaf(z_t, "z_t"), step, rows, cl);
        auto item_loss = tape.mean(tape.square(tape.sub(pred, tape.leaf(y, "v_target"))));
        loss = loss < 0 ? item_loss : tape.add(loss, item_loss);
    }
    loss = tape.scale(loss, 1.0 / static_cast<double>(batch.size()));
    rep.loss = tape.value(loss).data[0];
    if (!std::isfinite(rep.loss)) {
        rep.applied = false;
        return rep;
    }
    try {
        auto grads = tape.gradients(loss, p);
        rep.grad_norm = grad_norm(grads);
        rep.applied = opt.step(m.params, grads);
    } catch (const GradientError&) {
        rep.applied = false;
    }
    rep.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

namespace {

DenseArray run_ddim(const Denoiser& m, const NoiseSchedule& sched, const Condition& cond,
                    const SamplerOptions& opts, RandomStream& gen, std::size_t h, std::size_t w) {
    DenseArray z = gen.normal_array({static_cast<std::size_t>(m.cfg.latent_channels), h, w});
    auto ts = ddim_timesteps(sched.T, opts.steps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        int t = ts[i];
        int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        DenseArray v_c = denoise(m, z, t, cond);
        DenseArray v_hat;
        if (opts.guidance == 1.0) {
            v_hat = std::move(v_c);
        } else {
            DenseArray v_u = denoise(m, z, t, Condition::none());
            v_hat = guided_v(v_u, v_c, opts.guidance);
        }
        z = ddim_step(z, v_hat, t, t_prev, sched);
    }
    return z;
}

DenseArray run_ddpm(const Denoiser& m, const NoiseSchedule& sched, const Condition& cond,
                    double guidance, RandomStream& gen, std::size_t h, std::size_t w) {
    DenseArray z = gen.normal_array({static_cast<std::size_t>(m.cfg.latent_channels), h, w});
    for (int t = sched.T; t >= 1; --t) {
        DenseArray v_c = denoise(m, z, t, cond);
        DenseArray v_hat;
        if (guidance == 1.0) {
            v_hat = std::move(v_c);
        } else {
            DenseArray v_u = denoise(m, z, t, Condition::none());
            v_hat = guided_v(v_u, v_c, guidance);
        }
        DenseArray eta = gen.normal_array(z.shape);
        z = ddpm_step(z, v_hat, t, eta, sched);
    }
    return z;
}

}  // namespace

SampleResult sample_text(const Denoiser& m, const JointVae& vae, const NoiseSchedule& sched,
                         const std::vector<std::string>& tags, const SamplerOptions& opts,
                         std::uint64_t seed, std::size_t latent_h, std::size_t latent_w) {
    if (opts.steps < 1) throw ValueError("sample_text: steps must be >= 1");
    if (opts.guidance < 0.0) throw ValueError("sample_text: guidance weight must be >= 0");
    Condition cond = Condition::with_tags(tags);
    RandomStream gen = RandomStream(seed).split(1);
    DenseArray z = opts.ddpm ? run_ddpm(m, sched, cond, opts.guidance, gen, latent_h, latent_w)
                             : run_ddim(m, sched, cond, opts, gen, latent_h, latent_w);
    SampleResult r;
    r.z0 = z;
    DenseArray z_vae = z * m.latent_scale;
    ParamSet dec = vae.ema_dec.snapshot(vae.dec);
    r.decoded = vae_decode(vae, dec, z_vae);
    return r;
}

GeometryPrediction predict_geometry(const Denoiser& m, const JointVae& vae,
                                    const NoiseSchedule& sched, const DenseArray& color, int steps,
                                    std::uint64_t seed, bool ddpm) {
    if (m.cfg.cond_latent_channels <= 0)
        throw ValueError("predict_geometry: model is not color-latent conditioned");
    std::size_t f = static_cast<std::size_t>(vae.cfg.downsample());
    if (color.rank() != 3 || color.shape[0] != 3)
        throw ShapeError("predict_geometry: color must be [3,H,W]");
    if (color.shape[1] % f != 0 || color.shape[2] % f != 0)
        throw ShapeError("predict_geometry: spatial extent not divisible by the downsample factor " +
                         std::to_string(f));
    DenseArray zx = encode_color_latent(vae, color);
    double cs = m.cond_scale > 0.0 ? m.cond_scale : 1.0;
    for (double& v : zx.data) v /= cs;
    Condition cond = Condition::with_color_latent(zx);

    RandomStream gen = RandomStream(seed).split(1);
    SamplerOptions opts;
    opts.steps = steps;
    opts.guidance = 1.0;  // plain conditional sampling, no text guidance
    DenseArray z = ddpm ? run_ddpm(m, sched, cond, 1.0, gen, zx.shape[1], zx.shape[2])
                        : run_ddim(m, sched, cond, opts, gen, zx.shape[1], zx.shape[2]);

    DenseArray z_vae = z * m.latent_scale;
    ParamSet dec = vae.ema_dec.snapshot(vae.dec);
    DecodedTriple full = vae_decode(vae, dec, z_vae);
    GeometryPrediction out;
    out.depth = std::move(full.depth);
    out.normal.vectors = std::move(full.normal);
    out.normal.valid = BoolMask(out.depth.shape[0], out.depth.shape[1], true);
    out.color_latent = std::move(zx);
    return out;
}

DenseArray sample_latent_ddpm(const Denoiser& m, const NoiseSchedule& sched, const Condition& cond,
                              std::uint64_t seed, std::size_t latent_h, std::size_t latent_w) {
    RandomStream gen = RandomStream(seed).split(1);
    return run_ddpm(m, sched, cond, 1.0, gen, latent_h, latent_w);
}

double rms_scale(const std::vector<DenseArray>& latents) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& z : latents) {
        for (double v : z.data) s += v * v;
        n += z.size();
    }
    if (n == 0) throw ValueError("rms_scale: no latents");
    return std::max(1e-8, std::sqrt(s / static_cast<double>(n)));
}

Denoiser finetune_from_text_model(const Denoiser& text_model, std::uint64_t seed) {
    if (text_model.cfg.cond_latent_channels != 0)
        throw ValueError("finetune_from_text_model: source is already color-conditioned");
    DenoiserConfig cfg = text_model.cfg;
    cfg.cond_latent_channels = cfg.latent_channels;
    Denoiser m = Denoiser::create(cfg, seed);
    m.latent_scale = text_model.latent_scale;
    m.cond_scale = 1.0;

    for (std::size_t i = 0; i < m.params.count(); ++i) {
        const std::string& name = m.params.names[i];
        auto it = text_model.params.index.find(name);
        if (it == text_model.params.index.end()) continue;
        const DenseArray& src = text_model.params.values[it->second];
        DenseArray& dst = m.params.values[i];
        if (dst.same_shape(src)) {
            dst = src;
        } else if (name == "conv_in.w") {
            // copy pretrained input columns; the appended condition channels
            // start at zero so the finetuned model initially matches the text
            // model under a null condition
            dst.fill(0.0);
            std::size_t k2 = dst.shape[2] * dst.shape[3];
            std::size_t cin_src = src.shape[1];
            for (std::size_t co = 0; co < dst.shape[0]; ++co)
                for (std::size_t ci = 0; ci < cin_src; ++ci)
                    for (std::size_t j = 0; j < k2; ++j)
                        dst.data[(co * dst.shape[1] + ci) * k2 + j] =
                            src.data[(co * cin_src + ci) * k2 + j];
        }
    }
    return m;
}

void save_denoiser(const std::string& path, const Denoiser& m) {
    ParamSet all;
    merge_prefixed(all, "net", m.params);
    all.add("meta.latent_scale", DenseArray::scalar(m.latent_scale));
    all.add("meta.cond_scale", DenseArray::scalar(m.cond_scale));
    all.add("meta.cond_channels", DenseArray::scalar(static_cast<double>(m.cfg.cond_latent_channels)));
    all.add("meta.T", DenseArray::scalar(static_cast<double>(m.cfg.T)));
    write_checkpoint(path, all);
}

void load_denoiser(const std::string& path, Denoiser& m) {
    ParamSet all = read_checkpoint(path);
    double cond_ch = all.at("meta.cond_channels").data[0];
    if (static_cast<int>(cond_ch) != m.cfg.cond_latent_channels)
        throw FormatError("load_denoiser: checkpoint has " + std::to_string(static_cast<int>(cond_ch)) +
                          " condition channels but the model expects " +
                          std::to_string(m.cfg.cond_latent_channels));
    double T = all.at("meta.T").data[0];
    if (static_cast<int>(T) != m.cfg.T)
        throw FormatError("load_denoiser: checkpoint trained with T=" +
                          std::to_string(static_cast<int>(T)));
    load_values(m.params, extract_prefixed(all, "net"));
    m.latent_scale = all.at("meta.latent_scale").data[0];
    m.cond_scale = all.at("meta.cond_scale").data[0];
}

}  // namespace orchid
