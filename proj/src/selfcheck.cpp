#include "orchidkit/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

#include "orchidkit/checkpoint.hpp"
#include "orchidkit/geometry.hpp"
#include "orchidkit/inpaint.hpp"
#include "orchidkit/ldm.hpp"
#include "orchidkit/metrics.hpp"
#include "orchidkit/nn.hpp"
#include "orchidkit/rng.hpp"
#include "orchidkit/schedule.hpp"
#include "orchidkit/synthdata.hpp"
#include "orchidkit/vae.hpp"

namespace orchid {

namespace {

struct Timer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

VaeConfig tiny_vae_config() {
    VaeConfig cfg;
    cfg.stage_widths = {8, 8};
    cfg.blocks_per_stage = 1;
    cfg.image_size = 16;
    cfg.lpips_scales = 2;
    cfg.lpips_channels = 4;
    return cfg;
}

std::vector<TrainItem> tiny_batch(const JointVae& m, int count, std::uint64_t seed) {
    DatasetOptions opts;
    opts.count = count;
    opts.seed = seed;
    opts.height = m.cfg.image_size;
    opts.width = m.cfg.image_size;
    opts.scene.max_objects = 2;
    std::vector<TrainItem> items;
    for (int i = 0; i < count; ++i) {
        Sample s = render(scene_for_index(opts.seed, i, opts.scene), opts.height, opts.width);
        items.push_back(make_train_item(s));
    }
    cache_distill_anchors(m, items);
    return items;
}

}  // namespace

double fd_max_rel_error(std::vector<DenseArray>& leaves,
                        const std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>& build,
                        int max_coords_per_leaf, std::uint64_t coord_seed, double h_scale) {
    auto eval_grads = [&]() {
        Tape t;
        std::vector<Tape::Id> ids;
        for (auto& l : leaves) ids.push_back(t.param(l));
        Tape::Id loss = build(t, ids);
        return std::make_pair(t.value(loss).data[0], t.gradients(loss, ids));
    };
    auto eval_loss = [&]() {
        Tape t;
        std::vector<Tape::Id> ids;
        for (auto& l : leaves) ids.push_back(t.leaf(l));
        return t.value(build(t, ids)).data[0];
    };

    auto [loss0, grads] = eval_grads();
    (void)loss0;
    RandomStream pick(coord_seed);
    double max_rel = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        DenseArray& L = leaves[li];
        std::vector<std::size_t> coords;
        if (max_coords_per_leaf < 0 || static_cast<std::size_t>(max_coords_per_leaf) >= L.size()) {
            coords.resize(L.size());
            for (std::size_t i = 0; i < L.size(); ++i) coords[i] = i;
        } else {
            for (int k = 0; k < max_coords_per_leaf; ++k)
                coords.push_back(static_cast<std::size_t>(
                    pick.uniform_int(0, static_cast<std::int64_t>(L.size()) - 1)));
        }
        for (std::size_t i : coords) {
            double orig = L.data[i];
            double h = h_scale * std::max(1.0, std::abs(orig));
            L.data[i] = orig + h;
            double fp = eval_loss();
            L.data[i] = orig - h;
            double fm = eval_loss();
            L.data[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double ad = grads[li].data[i];
            double rel = std::abs(ad - fd) / std::max({std::abs(fd), std::abs(ad), 1e-3});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

CheckResult check_layer_gradients() {
    Timer timer;
    CheckResult r{"gradients: layer kinds", false, ""};
    RandomStream rng(101);
    double worst = 0.0;
    std::string worst_name;
    auto record = [&](const char* name, double rel) {
        if (rel > worst) {
            worst = rel;
            worst_name = name;
        }
    };

    {  // conv2d stride 1 and stride 2
        std::vector<DenseArray> ls = {rng.normal_array({3, 6, 6}), rng.normal_array({4, 3, 3, 3}, 0.4),
                                      rng.normal_array({4}, 0.2)};
        record("conv2d/s1", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.conv2d(p[0], p[1], p[2], 1, 1)));
               }));
        record("conv2d/s2", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.conv2d(p[0], p[1], p[2], 2, 1)));
               }));
    }
    {  // transposed conv
        std::vector<DenseArray> ls = {rng.normal_array({3, 4, 4}), rng.normal_array({3, 2, 3, 3}, 0.4),
                                      rng.normal_array({2}, 0.2)};
        record("transposed-conv2d", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.conv2d_transpose(p[0], p[1], p[2], 2, 1)));
               }));
    }
    {  // group-norm
        std::vector<DenseArray> ls = {rng.normal_array({8, 5, 5}), rng.uniform_array({8}, 0.5, 1.5),
                                      rng.normal_array({8}, 0.3)};
        record("group-norm", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.group_norm(p[0], p[1], p[2], 4)));
               }));
    }
    {  // silu
        std::vector<DenseArray> ls = {rng.normal_array({5, 4, 4})};
        record("silu-activation", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.silu(p[0])));
               }));
    }
    {  // linear
        std::vector<DenseArray> ls = {rng.normal_array({3, 6}), rng.normal_array({4, 6}, 0.4),
                                      rng.normal_array({4}, 0.2)};
        record("linear", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.linear(p[0], p[1], p[2])));
               }));
    }
    {  // avg-pool + nearest-upsample
        std::vector<DenseArray> ls = {rng.normal_array({3, 6, 6})};
        record("avg-pool", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.avg_pool2(p[0])));
               }));
        record("nearest-upsample", fd_max_rel_error(ls, [](Tape& t, const std::vector<Tape::Id>& p) {
                   return t.mean(t.square(t.upsample_nearest2(p[0])));
               }));
    }
    // sinusoidal-time-embed has no trainable inputs; pin its contract instead
    DenseArray e0 = sinusoidal_time_embed(0, 8, 100);
    bool embed_ok = true;
    for (int i = 0; i < 4; ++i)
        embed_ok = embed_ok && e0.data[2 * i] == 0.0 && e0.data[2 * i + 1] == 1.0;
    DenseArray ea = sinusoidal_time_embed(37, 16, 100);
    DenseArray eb = sinusoidal_time_embed(37, 16, 100);
    embed_ok = embed_ok && ea.data == eb.data;

    r.pass = worst < 1e-6 && embed_ok;
    r.detail = "max rel err " + fmt(worst) + " (" + worst_name + ")" +
               (embed_ok ? "" : "; time-embed contract violated");
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_loss_gradients() {
    Timer timer;
    CheckResult r{"gradients: vae loss terms", false, ""};

    struct TermSpec {
        const char* name;
        std::function<void(VaeLossWeights&)> enable;
        int objective;  // 0 = enc_obj, 1 = dec_obj, 2 = disc_obj
    };
    std::vector<TermSpec> terms = {
        {"L_rec", [](VaeLossWeights& w) { w.x_rec = 1; }, 0},
        {"L_adv", [](VaeLossWeights& w) { w.x_adv = 1; }, 0},
        {"L_LPIPS", [](VaeLossWeights& w) { w.x_lpips = 1; }, 0},
        {"L_local_disc", [](VaeLossWeights& w) { w.x_local = 1; }, 0},
        {"L_depth_rec", [](VaeLossWeights& w) { w.d_rec = 1; }, 0},
        {"L_depth_grad", [](VaeLossWeights& w) { w.d_grad = 1; }, 0},
        {"L_normal_rec", [](VaeLossWeights& w) { w.n_rec = 1; }, 0},
        {"L_KL", [](VaeLossWeights& w) { w.kl = 1; }, 0},
        {"L_distill", [](VaeLossWeights& w) { w.distill = 1; }, 0},
        {"L_disc(gamma)", [](VaeLossWeights& w) { w.gamma = 1; }, 1},
        {"L_disc", [](VaeLossWeights&) {}, 2},
    };

    double worst = 0.0;
    std::string worst_name;
    for (const auto& term : terms) {
        VaeConfig cfg = tiny_vae_config();
        cfg.weights = VaeLossWeights{0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
        term.enable(cfg.weights);
        JointVae m = JointVae::create(cfg, 404);
        auto batch = tiny_batch(m, 1, 77);

        // flatten all three parameter sets into FD leaves
        std::vector<DenseArray> leaves;
        for (const auto& ps : {&m.enc, &m.dec, &m.disc})
            for (const auto& v : ps->values) leaves.push_back(v);
        std::size_t n_enc = m.enc.count(), n_dec = m.dec.count();

        int objective = term.objective;
        auto build = [&m, &batch, n_enc, n_dec, objective](Tape& t,
                                                           const std::vector<Tape::Id>& ids) {
            std::vector<Tape::Id> enc_ids(ids.begin(), ids.begin() + n_enc);
            std::vector<Tape::Id> dec_ids(ids.begin() + n_enc, ids.begin() + n_enc + n_dec);
            std::vector<Tape::Id> disc_ids(ids.begin() + n_enc + n_dec, ids.end());
            RandomStream noise(2024);  // reparametrization noise fixed across FD evals
            auto g = build_vae_loss_graph(t, m, enc_ids, dec_ids, disc_ids, batch, noise);
            return objective == 0 ? g.enc_obj : objective == 1 ? g.dec_obj : g.disc_obj;
        };
        double rel = fd_max_rel_error(leaves, build, 6, 9000 + objective);
        if (rel > worst) {
            worst = rel;
            worst_name = term.name;
        }
    }
    r.pass = worst < 1e-6;
    r.detail = "max rel err " + fmt(worst) + " (" + worst_name + ")";
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_preprocess() {
    Timer timer;
    CheckResult r{"depth preprocessing", false, ""};
    std::ostringstream why;
    bool ok = true;

    {  // hand-derived case: [1,2,4] -> [3,1,0]
        MetricDepth d;
        d.values = DenseArray::from({1, 3}, {1, 2, 4});
        d.valid = BoolMask(1, 3, true);
        ModelDepth out = preprocess_depth(d);
        double want[3] = {3, 1, 0};
        for (int i = 0; i < 3; ++i)
            if (out.values.data[i] != want[i]) {
                ok = false;
                why << "hand case mismatch at " << i << "; ";
            }
    }
    {  // positive-scale invariance and exact zero minimum
        RandomStream rng(5);
        MetricDepth d;
        d.values = rng.uniform_array({8, 8}, 0.5, 9.0);
        d.valid = BoolMask(8, 8, true);
        d.valid.set(3, 3, false);
        ModelDepth a = preprocess_depth(d);
        MetricDepth d3;
        d3.values = d.values * 3.0;
        d3.valid = d.valid;
        ModelDepth b = preprocess_depth(d3);
        double dev = max_abs_diff(a.values, b.values);
        if (dev > 1e-12) {
            ok = false;
            why << "scale invariance broke: " << fmt(dev) << "; ";
        }
        double mn = 1e300;
        for (std::size_t i = 0; i < a.values.size(); ++i)
            if (d.valid.m[i]) mn = std::min(mn, a.values.data[i]);
        if (mn != 0.0) {
            ok = false;
            why << "minimum not exactly 0; ";
        }
    }
    {  // constant depth: epsilon floor + degeneracy flag
        MetricDepth d;
        d.values = DenseArray({4, 4}, 2.0);
        d.valid = BoolMask(4, 4, true);
        ModelDepth out = preprocess_depth(d);
        bool all_zero = true;
        for (double v : out.values.data) all_zero = all_zero && v == 0.0;
        if (!out.degenerate || !all_zero) {
            ok = false;
            why << "constant-depth degeneracy not flagged; ";
        }
    }
    r.pass = ok;
    r.detail = ok ? "hand case exact, scale-invariant <= 1e-12, min == 0" : why.str();
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_schedule_suite() {
    Timer timer;
    CheckResult r{"schedule suite", false, ""};
    std::ostringstream why;
    bool ok = true;

    NoiseSchedule zt = build_schedule(1000, 0.00085, 0.012, true);
    NoiseSchedule raw = build_schedule(1000, 0.00085, 0.012, false);
    for (int t = 2; t <= zt.T; ++t)
        if (!(zt.alpha_bar_at(t) < zt.alpha_bar_at(t - 1))) {
            ok = false;
            why << "alpha_bar not strictly decreasing at t=" << t << "; ";
            break;
        }
    if (!(zt.alpha_bar_at(zt.T) <= 1e-12)) {
        ok = false;
        why << "terminal alpha_bar " << fmt(zt.alpha_bar_at(zt.T)) << " > 1e-12; ";
    }
    if (std::abs(std::sqrt(zt.alpha_bar_at(1)) - std::sqrt(raw.alpha_bar_at(1))) > 1e-12) {
        ok = false;
        why << "rescale moved sqrt(alpha_bar_1); ";
    }

    {  // uniform beta hand product
        NoiseSchedule u = build_schedule(2, 0.5, 0.5, false);
        if (std::abs(u.alpha_bar_at(1) - 0.5) > 1e-15 || std::abs(u.alpha_bar_at(2) - 0.25) > 1e-15) {
            ok = false;
            why << "uniform-beta product wrong; ";
        }
    }

    {  // six-direction conversion consistency on the unrescaled schedule
        RandomStream rng(11);
        double worst = 0.0;
        for (int t : {1, 7, 250, 600, 999, 1000}) {
            DenseArray z0 = rng.normal_array({4, 3, 3});
            DenseArray eps = rng.normal_array({4, 3, 3});
            DenseArray z_t = forward_noise(z0, t, eps, raw);
            DenseArray v = v_target(z0, eps, t, raw);
            auto check = [&](const DenseArray& got, const DenseArray& want) {
                worst = std::max(worst, max_abs_diff(got, want));
            };
            using P = Parametrization;
            check(convert(v, z_t, t, P::V, P::X0, raw), z0);
            check(convert(v, z_t, t, P::V, P::Epsilon, raw), eps);
            check(convert(z0, z_t, t, P::X0, P::Epsilon, raw), eps);
            check(convert(z0, z_t, t, P::X0, P::V, raw), v);
            check(convert(eps, z_t, t, P::Epsilon, P::X0, raw), z0);
            check(convert(eps, z_t, t, P::Epsilon, P::V, raw), v);
        }
        if (worst > 1e-10) {
            ok = false;
            why << "conversion consistency " << fmt(worst) << " > 1e-10; ";
        }
    }

    {  // exact-denoiser DDIM inversion
        RandomStream rng(12);
        DenseArray z0 = rng.normal_array({2, 4, 4});
        DenseArray eps = rng.normal_array({2, 4, 4});
        DenseArray z = forward_noise(z0, zt.T, eps, zt);
        auto ts = ddim_timesteps(zt.T, 10);
        for (std::size_t i = 0; i < ts.size(); ++i) {
            int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
            double a = std::sqrt(zt.alpha_bar_at(t)), b = std::sqrt(1.0 - zt.alpha_bar_at(t));
            DenseArray v(z.shape);
            for (std::size_t k = 0; k < v.size(); ++k) v.data[k] = (a * z.data[k] - z0.data[k]) / b;
            z = ddim_step(z, v, t, t_prev, zt);
        }
        double err = max_abs_diff(z, z0);
        if (err > 1e-8) {
            ok = false;
            why << "ddim oracle failed to invert: " << fmt(err) << "; ";
        }
    }

    {  // forward-noise moments vs closed form, 1e5 draws
        RandomStream rng(13);
        int t = 350;
        DenseArray z0 = DenseArray::from({4}, {0.3, -1.2, 2.0, 0.0});
        double ab = raw.alpha_bar_at(t);
        const int N = 100000;
        std::vector<double> mean(4, 0.0), m2(4, 0.0);
        for (int k = 0; k < N; ++k) {
            DenseArray eps = rng.normal_array({4});
            DenseArray zt2 = forward_noise(z0, t, eps, raw);
            for (int i = 0; i < 4; ++i) {
                mean[i] += zt2.data[i];
                m2[i] += zt2.data[i] * zt2.data[i];
            }
        }
        double se_mean = std::sqrt((1.0 - ab) / N);
        double var_true = 1.0 - ab;
        double se_var = var_true * std::sqrt(2.0 / N);
        for (int i = 0; i < 4; ++i) {
            double mu = mean[i] / N;
            double var = m2[i] / N - mu * mu;
            if (std::abs(mu - std::sqrt(ab) * z0.data[i]) > 3.0 * se_mean) {
                ok = false;
                why << "moment mean out of 3 SE at dim " << i << "; ";
            }
            if (std::abs(var - var_true) > 3.0 * se_var) {
                ok = false;
                why << "moment variance out of 3 SE at dim " << i << "; ";
            }
        }
    }

    {  // ddpm posterior-mean oracle and the eta=0 endpoint
        RandomStream rng(14);
        DenseArray z0 = rng.normal_array({3, 2, 2});
        DenseArray eps = rng.normal_array({3, 2, 2});
        int t = 500;
        DenseArray z_t = forward_noise(z0, t, eps, raw);
        DenseArray v = v_target(z0, eps, t, raw);
        DenseArray eta(z_t.shape, 0.0);
        DenseArray got = ddpm_step(z_t, v, t, eta, raw);
        double ab = raw.alpha_bar_at(t), abp = raw.alpha_bar_at(t - 1);
        double c0 = std::sqrt(abp) * raw.beta_at(t) / (1 - ab);
        double c1 = std::sqrt(raw.alpha_at(t)) * (1 - abp) / (1 - ab);
        DenseArray want(z_t.shape);
        for (std::size_t i = 0; i < want.size(); ++i)
            want.data[i] = c0 * z0.data[i] + c1 * z_t.data[i];
        if (max_abs_diff(got, want) > 1e-12) {
            ok = false;
            why << "ddpm posterior mean mismatch; ";
        }
        DenseArray loud = rng.normal_array(z_t.shape);
        DenseArray a1 = ddpm_step(z_t, v, 1, eta, raw);
        DenseArray a2 = ddpm_step(z_t, v, 1, loud, raw);
        if (max_abs_diff(a1, a2) != 0.0) {
            ok = false;
            why << "eta not forced to zero at t=1; ";
        }
    }

    r.pass = ok;
    r.detail = ok ? "tables, conversions (1e-10), ddim inversion (1e-8), moments (3 SE)" : why.str();
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_gradient_partition() {
    Timer timer;
    CheckResult r{"three-way gradient partition", false, ""};
    std::ostringstream why;
    bool ok = true;

    {  // L_distill == 0 at initialization
        VaeConfig cfg = tiny_vae_config();
        JointVae m = JointVae::create(cfg, 808);
        auto batch = tiny_batch(m, 2, 31);
        RandomStream noise(3);
        VaeLosses l = vae_losses(m, batch, noise);
        if (l.distill_raw != 0.0) {
            ok = false;
            why << "L_distill at init is " << fmt(l.distill_raw) << "; ";
        }
    }

    // discriminator loss perturbation must not reach encoder updates, and KL
    // perturbation must not reach discriminator updates
    auto one_step_hashes = [&](double kl_w, double gamma_w) {
        VaeConfig cfg = tiny_vae_config();
        cfg.weights.kl = kl_w;
        cfg.weights.gamma = gamma_w;
        JointVae m = JointVae::create(cfg, 909);
        auto batch = tiny_batch(m, 2, 32);
        VaeOptimizers opt;
        opt.init(m, 1e-3);
        RandomStream rng(44);
        vae_train_step(m, batch, opt, rng);
        return std::array<std::uint64_t, 3>{m.enc.hash(), m.dec.hash(), m.disc.hash()};
    };
    auto base = one_step_hashes(1e-3, 0.1);
    auto kl_bump = one_step_hashes(10.0, 0.1);
    auto gamma_bump = one_step_hashes(1e-3, 5.0);
    if (kl_bump[2] != base[2]) {
        ok = false;
        why << "KL perturbation changed the discriminator update; ";
    }
    if (kl_bump[0] == base[0]) {
        ok = false;
        why << "KL perturbation had no effect on the encoder (check wiring); ";
    }
    if (gamma_bump[0] != base[0]) {
        ok = false;
        why << "disc-loss perturbation changed the encoder update; ";
    }
    if (gamma_bump[1] == base[1]) {
        ok = false;
        why << "gamma perturbation had no effect on the decoder (check wiring); ";
    }
    if (gamma_bump[2] != base[2]) {
        ok = false;
        why << "gamma perturbation changed the discriminator update; ";
    }

    {  // discriminator-only training leaves encoder/decoder untouched
        VaeConfig cfg = tiny_vae_config();
        cfg.weights = VaeLossWeights{0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
        JointVae m = JointVae::create(cfg, 910);
        auto batch = tiny_batch(m, 2, 33);
        VaeOptimizers opt;
        opt.init(m, 1e-3);
        std::uint64_t enc0 = m.enc.hash(), dec0 = m.dec.hash(), disc0 = m.disc.hash();
        RandomStream rng(45);
        vae_train_step(m, batch, opt, rng);
        if (m.enc.hash() != enc0 || m.dec.hash() != dec0) {
            ok = false;
            why << "discriminator update altered encoder/decoder parameters; ";
        }
        if (m.disc.hash() == disc0) {
            ok = false;
            why << "discriminator did not train under its own loss; ";
        }
    }

    r.pass = ok;
    r.detail = ok ? "hash-isolated updates; L_distill(init) == 0" : why.str();
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_guidance() {
    Timer timer;
    CheckResult r{"classifier-free guidance identities", false, ""};
    std::ostringstream why;
    bool ok = true;

    DenoiserConfig dc;
    dc.base_width = 16;
    dc.temb_dim = 16;
    dc.emb_dim = 32;
    dc.T = 100;
    dc.vocabulary = tag_vocabulary();
    Denoiser m = Denoiser::create(dc, 31337);
    // zero-init output conv would make all branches equal; give it signal
    RandomStream wiggle(9);
    for (double& v : m.params.values[m.net.conv_out.w].data) v = 0.05 * wiggle.normal();

    RandomStream rng(77);
    DenseArray z = rng.normal_array({8, 4, 4});
    Condition tags = Condition::with_tags({"has:sphere", "wall"});
    DenseArray v_c = denoise(m, z, 42, tags);
    DenseArray v_u = denoise(m, z, 42, Condition::none());

    if (max_abs_diff(v_c, v_u) == 0.0) {
        ok = false;
        why << "conditional and unconditional branches coincide (conditioning inert); ";
    }
    if (guided_v(v_u, v_c, 1.0).data != v_c.data) {
        ok = false;
        why << "w=1 does not equal the conditional prediction exactly; ";
    }
    if (guided_v(v_u, v_c, 0.0).data != v_u.data) {
        ok = false;
        why << "w=0 does not equal the unconditional prediction exactly; ";
    }
    double worst = 0.0;
    for (double w : {0.3, 1.7, 2.4}) {
        DenseArray g = guided_v(v_u, v_c, w);
        for (std::size_t i = 0; i < g.size(); ++i) {
            double want = v_u.data[i] + w * (v_c.data[i] - v_u.data[i]);
            worst = std::max(worst, std::abs(g.data[i] - want));
        }
    }
    if (worst > 1e-12) {
        ok = false;
        why << "affinity residual " << fmt(worst) << " > 1e-12; ";
    }

    {  // empty tag list routes to the null embedding
        DenseArray v_empty = denoise(m, z, 42, Condition::with_tags({}));
        if (v_empty.data != v_u.data) {
            ok = false;
            why << "empty tag list does not route to the null embedding; ";
        }
    }

    r.pass = ok;
    r.detail = ok ? "w=1/w=0 exact, affine in w (3 weights), null routing" : why.str();
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_inpaint_contract() {
    Timer timer;
    CheckResult r{"inpainting contract", false, ""};
    std::ostringstream why;
    bool ok = true;

    VaeConfig vcfg = tiny_vae_config();
    JointVae vae = JointVae::create(vcfg, 515);
    DenoiserConfig dc;
    dc.base_width = 16;
    dc.temb_dim = 16;
    dc.emb_dim = 32;
    dc.T = 120;
    dc.vocabulary = tag_vocabulary();
    Denoiser den = Denoiser::create(dc, 616);
    NoiseSchedule sched = build_schedule(dc.T, 0.00085, 0.012, true);

    DatasetOptions opts;
    opts.height = opts.width = vcfg.image_size;
    opts.scene.max_objects = 2;
    Sample known = render(scene_for_index(900, 0, opts.scene), opts.height, opts.width);

    {  // latent-mask derivation block arithmetic
        BoolMask px(32, 32, false);
        px.set(12, 20, true);
        BoolMask lm = derive_latent_mask(px, 8, 1);
        std::size_t cnt = lm.count();
        bool shape_ok = lm.h == 4 && lm.w == 4 && cnt == 9 && lm.at(1, 2);
        BoolMask empty = derive_latent_mask(BoolMask(32, 32, false), 8, 1);
        BoolMask full = derive_latent_mask(BoolMask(32, 32, true), 8, 1);
        if (!shape_ok || empty.count() != 0 || full.count() != 16) {
            ok = false;
            why << "latent mask derivation wrong; ";
        }
    }

    InpaintTask task;
    task.known = known;
    task.pixel_mask = BoolMask(known.color.shape[1], known.color.shape[2], false);
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 6; ++x) task.pixel_mask.set(y, x, true);
    task.resample = 2;
    task.jump = 8;
    task.dilation = 1;

    {  // unmasked-region fidelity is bitwise
        InpaintResult res = inpaint(task, den, vae, sched, 2024);
        DenseArray z_known = inpaint_known_latents(task, den, vae);
        std::size_t plane = res.latent_mask.h * res.latent_mask.w;
        for (std::size_t i = 0; i < plane && ok; ++i) {
            if (res.latent_mask.m[i]) continue;
            for (std::size_t c = 0; c < z_known.shape[0]; ++c)
                if (res.z0.data[c * plane + i] != z_known.data[c * plane + i]) {
                    ok = false;
                    why << "unmasked latent cell differs from the known latent; ";
                    break;
                }
        }
    }

    {  // empty mask reproduces the reconstruction exactly
        InpaintTask empty = task;
        empty.pixel_mask = BoolMask(known.color.shape[1], known.color.shape[2], false);
        InpaintResult res = inpaint(empty, den, vae, sched, 31);
        DenseArray z_known = inpaint_known_latents(empty, den, vae);
        if (res.z0.data != z_known.data) {
            ok = false;
            why << "empty mask output latent differs from the known latent; ";
        }
        ParamSet dec = vae.ema_dec.snapshot(vae.dec);
        DecodedTriple recon = vae_decode(vae, dec, z_known * den.latent_scale);
        if (res.decoded.color.data != recon.color.data || res.decoded.depth.data != recon.depth.data ||
            res.decoded.normal.data != recon.normal.data) {
            ok = false;
            why << "empty mask decode differs from the VAE reconstruction; ";
        }
    }

    {  // full mask with r=1, j=0 matches the unconditional ddpm trajectory
        InpaintTask full = task;
        full.pixel_mask = BoolMask(known.color.shape[1], known.color.shape[2], true);
        full.resample = 1;
        full.jump = 0;
        InpaintResult res = inpaint(full, den, vae, sched, 97);
        if (!res.ran_unconditional) {
            ok = false;
            why << "fully-masked task not flagged; ";
        }
        DenseArray ref = sample_latent_ddpm(den, sched, Condition::none(), 97,
                                            res.z0.shape[1], res.z0.shape[2]);
        if (res.z0.data != ref.data) {
            ok = false;
            why << "full-mask trajectory differs from unconditional sampling; ";
        }
    }

    {  // r=1, j=0 plan is a plain descent
        auto plan = repaint_plan(50, 1, 0);
        bool plain = plan.size() == 50;
        for (std::size_t i = 0; i < plan.size() && plain; ++i)
            plain = plan[i].first == 50 - static_cast<int>(i) && plan[i].second;
        if (!plain) {
            ok = false;
            why << "repaint plan with r=1,j=0 is not a plain descent; ";
        }
    }

    r.pass = ok;
    r.detail = ok ? "bitwise fidelity, empty/full mask degeneracies, plan reduction" : why.str();
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_pca() {
    Timer timer;
    CheckResult r{"latent PCA redundancy", false, ""};
    std::ostringstream why;
    bool ok = true;
    RandomStream rng(2718);

    {  // duplicated channel pairs: k <= C/2 at the 95% target
        std::vector<DenseArray> latents;
        for (int s = 0; s < 64; ++s) {
            DenseArray base = rng.normal_array({8, 4, 4});
            DenseArray z({16, 4, 4});
            for (std::size_t c = 0; c < 8; ++c)
                for (std::size_t i = 0; i < 16; ++i) {
                    z.data[(2 * c) * 16 + i] = base.data[c * 16 + i];
                    z.data[(2 * c + 1) * 16 + i] = base.data[c * 16 + i];
                }
            latents.push_back(std::move(z));
        }
        int k = latent_pca_redundancy(latents, 0.95);
        if (k > 8) {
            ok = false;
            why << "duplicated channels gave k=" << k << " > 8; ";
        }
    }
    {  // isotropic noise: k in {15,16} at the 95% target
        std::vector<DenseArray> latents;
        for (int s = 0; s < 256; ++s) latents.push_back(rng.normal_array({16, 4, 4}));
        int k = latent_pca_redundancy(latents, 0.95);
        if (k != 15 && k != 16) {
            ok = false;
            why << "isotropic noise gave k=" << k << "; ";
        }
    }
    {  // rank-one fixture and monotonicity in the target
        std::vector<DenseArray> latents;
        for (int s = 0; s < 16; ++s) {
            DenseArray z({4, 2, 2}, 0.0);
            double v = rng.normal();
            for (std::size_t i = 0; i < 4; ++i) z.data[0 * 4 + i] = v;  // one live channel
            latents.push_back(std::move(z));
        }
        if (latent_pca_redundancy(latents, 0.5) != 1 || latent_pca_redundancy(latents, 1.0) != 1) {
            ok = false;
            why << "rank-one fixture not k=1; ";
        }
        std::vector<DenseArray> iso;
        for (int s = 0; s < 128; ++s) iso.push_back(rng.normal_array({8, 4, 4}));
        int k50 = latent_pca_redundancy(iso, 0.5);
        int k95 = latent_pca_redundancy(iso, 0.95);
        if (k50 > k95) {
            ok = false;
            why << "k not monotone in the variance target; ";
        }
    }

    r.pass = ok;
    r.detail = ok ? "duplicate pairs k<=C/2, isotropic k in {C-1,C}, monotone" : why.str();
    r.seconds = timer.seconds();
    return r;
}

CheckResult check_roundtrips() {
    Timer timer;
    CheckResult r{"container and checkpoint round trips", false, ""};
    std::ostringstream why;
    bool ok = true;
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "orchidkit_selfcheck";
    fs::create_directories(dir);

    {  // OSMP bit-exact round trip
        DatasetOptions opts;
        opts.height = 24;
        opts.width = 16;
        opts.scene.back_wall = false;  // include invalid (sky) pixels
        Sample s = render(scene_for_index(4242, 3, opts.scene), opts.height, opts.width);
        std::string path = (dir / "sample.osmp").string();
        write_sample(path, s);
        Sample t = read_sample(path);
        if (s.color.data != t.color.data || s.depth.values.data != t.depth.values.data ||
            s.normal.vectors.data != t.normal.vectors.data || s.depth.valid.m != t.depth.valid.m ||
            s.tags != t.tags || s.intrinsics.fx != t.intrinsics.fx) {
            ok = false;
            why << "OSMP round trip not bit-exact; ";
        }
        write_sample(path, t);
        std::uint64_t h1 = file_checksum(path);
        write_sample(path, s);
        if (file_checksum(path) != h1) {
            ok = false;
            why << "OSMP re-write changed bytes; ";
        }
    }
    {  // ORCD bit-exact round trip
        RandomStream rng(999);
        ParamSet ps;
        ps.add("a.w", rng.normal_array({3, 5}));
        ps.add("a.b", rng.normal_array({5}));
        ps.add("deep.nested.tensor", rng.normal_array({2, 2, 2, 2}));
        std::string path = (dir / "params.orcd").string();
        write_checkpoint(path, ps);
        ParamSet got = read_checkpoint(path);
        if (got.names != ps.names) {
            ok = false;
            why << "ORCD names differ; ";
        } else {
            for (std::size_t i = 0; i < ps.count(); ++i)
                if (got.values[i].data != ps.values[i].data || got.values[i].shape != ps.values[i].shape) {
                    ok = false;
                    why << "ORCD payload differs; ";
                    break;
                }
        }
    }
    {  // mask PNG round trip
        RandomStream rng(31);
        BoolMask m(20, 28, false);
        for (std::size_t i = 0; i < m.m.size(); ++i) m.m[i] = rng.uniform() < 0.3 ? 1 : 0;
        std::string path = (dir / "mask.png").string();
        write_mask_png(path, m);
        BoolMask got = read_mask_png(path);
        if (got.m != m.m || got.h != m.h || got.w != m.w) {
            ok = false;
            why << "mask PNG round trip differs; ";
        }
    }

    r.pass = ok;
    r.detail = ok ? "OSMP, ORCD, mask PNG all bit-exact" : why.str();
    r.seconds = timer.seconds();
    return r;
}

std::vector<CheckResult> run_property_suite() {
    return {
        check_layer_gradients(), check_loss_gradients(),  check_preprocess(),
        check_schedule_suite(),  check_gradient_partition(), check_guidance(),
        check_inpaint_contract(), check_pca(),            check_roundtrips(),
    };
}

std::string format_results(const std::vector<CheckResult>& results) {
    std::ostringstream os;
    std::size_t width = 0;
    for (const auto& r : results) width = std::max(width, r.name.size());
    for (const auto& r : results) {
        char line[512];
        std::snprintf(line, sizeof(line), "[%s] %-*s  %6.1fs  %s\n", r.pass ? "PASS" : "FAIL",
                      static_cast<int>(width), r.name.c_str(), r.seconds, r.detail.c_str());
        os << line;
    }
    return os.str();
}

}  // namespace orchid
