#include "orchidkit/nn.hpp"

#include <cmath>

namespace orchid {

std::vector<Tape::Id> push_params(Tape& t, const ParamSet& ps, bool trainable) {
    std::vector<Tape::Id> ids;
    ids.reserve(ps.count());
    for (const auto& v : ps.values) ids.push_back(trainable ? t.param(v) : t.leaf(v));
    return ids;
}

void LayerSpec::validate() const {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw ValueError(std::string("LayerSpec: ") + what + " must be positive");
    };
    switch (kind) {
        case Kind::Conv2d:
        case Kind::TransposedConv2d:
            positive(in_channels, "in_channels");
            positive(out_channels, "out_channels");
            positive(kernel, "kernel");
            positive(stride, "stride");
            if (padding < 0) throw ValueError("LayerSpec: padding must be non-negative");
            break;
        case Kind::GroupNorm:
            positive(in_channels, "in_channels");
            positive(groups, "groups");
            if (in_channels % groups != 0) throw ValueError("LayerSpec: channels not divisible by groups");
            break;
        case Kind::Linear:
            positive(in_channels, "in_features");
            positive(out_channels, "out_features");
            break;
        case Kind::SinusoidalTimeEmbed:
            positive(out_channels, "dim");
            if (out_channels % 2 != 0) throw ValueError("LayerSpec: time-embed dim must be even");
            break;
        case Kind::SiluActivation:
        case Kind::AvgPool:
        case Kind::NearestUpsample:
            break;
    }
}

Conv2d Conv2d::create(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k,
                      int stride, int padding, RandomStream& rng, double scale) {
    Conv2d c;
    c.stride = stride;
    c.padding = padding;
    double std = scale / std::sqrt(static_cast<double>(in_ch) * k * k);
    c.w = ps.add(name + ".w", rng.normal_array({static_cast<std::size_t>(out_ch),
                                                static_cast<std::size_t>(in_ch),
                                                static_cast<std::size_t>(k),
                                                static_cast<std::size_t>(k)},
                                               std));
    c.b = ps.add(name + ".b", DenseArray({static_cast<std::size_t>(out_ch)}, 0.0));
    return c;
}

Tape::Id Conv2d::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    return t.conv2d(x, p[w], p[b], stride, padding);
}

TransposedConv2d TransposedConv2d::create(ParamSet& ps, const std::string& name, int in_ch,
                                          int out_ch, int k, int stride, int padding,
                                          RandomStream& rng) {
    TransposedConv2d c;
    c.stride = stride;
    c.padding = padding;
    double std = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
    c.w = ps.add(name + ".w", rng.normal_array({static_cast<std::size_t>(in_ch),
                                                static_cast<std::size_t>(out_ch),
                                                static_cast<std::size_t>(k),
                                                static_cast<std::size_t>(k)},
                                               std));
    c.b = ps.add(name + ".b", DenseArray({static_cast<std::size_t>(out_ch)}, 0.0));
    return c;
}

Tape::Id TransposedConv2d::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    return t.conv2d_transpose(x, p[w], p[b], stride, padding);
}

GroupNorm GroupNorm::create(ParamSet& ps, const std::string& name, int channels, int groups) {
    GroupNorm g;
    g.groups = groups;
    g.gamma = ps.add(name + ".gamma", DenseArray({static_cast<std::size_t>(channels)}, 1.0));
    g.beta = ps.add(name + ".beta", DenseArray({static_cast<std::size_t>(channels)}, 0.0));
    return g;
}

Tape::Id GroupNorm::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    return t.group_norm(x, p[gamma], p[beta], groups);
}

Linear Linear::create(ParamSet& ps, const std::string& name, int in_f, int out_f,
                      RandomStream& rng, double scale) {
    Linear l;
    double std = scale / std::sqrt(static_cast<double>(in_f));
    l.w = ps.add(name + ".w", rng.normal_array({static_cast<std::size_t>(out_f),
                                                static_cast<std::size_t>(in_f)},
                                               std));
    l.b = ps.add(name + ".b", DenseArray({static_cast<std::size_t>(out_f)}, 0.0));
    return l;
}

Tape::Id Linear::apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const {
    return t.linear(x, p[w], p[b]);
}

DenseArray sinusoidal_time_embed(int t, int dim, int T) {
    if (dim <= 0 || dim % 2 != 0)
        throw ValueError("sinusoidal_time_embed: dim must be even and positive, got " +
                         std::to_string(dim));
    if (t < 0 || t > T) throw ValueError("sinusoidal_time_embed: step out of [0,T]");
    DenseArray e({static_cast<std::size_t>(dim)});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        // geometric frequencies: period 1 .. 10000
        double freq = std::pow(10000.0, -static_cast<double>(i) / std::max(1, half - 1));
        double phase = static_cast<double>(t) * freq;
        e.data[2 * i] = std::sin(phase);
        e.data[2 * i + 1] = std::cos(phase);
    }
    return e;
}

void AdamOptimizer::init(const ParamSet& ps) {
    step_count = 0;
    m.clear();
    v.clear();
    for (const auto& p : ps.values) {
        m.emplace_back(p.shape, 0.0);
        v.emplace_back(p.shape, 0.0);
    }
}

bool AdamOptimizer::step(ParamSet& ps, const std::vector<DenseArray>& grads) {
    if (grads.size() != ps.count()) throw ShapeError("AdamOptimizer: gradient count mismatch");
    for (const auto& g : grads)
        if (!g.all_finite()) return false;
    ++step_count;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        DenseArray& p = ps.values[i];
        DenseArray& mi = m[i];
        DenseArray& vi = v[i];
        const DenseArray& g = grads[i];
        require_same_shape(p, g, "AdamOptimizer");
        for (std::size_t j = 0; j < p.size(); ++j) {
            mi.data[j] = cfg.beta1 * mi.data[j] + (1.0 - cfg.beta1) * g.data[j];
            vi.data[j] = cfg.beta2 * vi.data[j] + (1.0 - cfg.beta2) * g.data[j] * g.data[j];
            double mhat = mi.data[j] / bc1;
            double vhat = vi.data[j] / bc2;
            p.data[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    return true;
}

void EmaShadow::init(const ParamSet& ps) {
    values.clear();
    for (const auto& p : ps.values) values.push_back(p);
}

namespace {

void ema_apply(std::vector<DenseArray>& values, const ParamSet& ps, double d) {
    if (values.size() != ps.count()) throw ShapeError("EmaShadow: parameter count mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
        DenseArray& s = values[i];
        const DenseArray& p = ps.values[i];
        for (std::size_t j = 0; j < s.size(); ++j) s.data[j] = d * s.data[j] + (1.0 - d) * p.data[j];
    }
}

}  // namespace

void EmaShadow::update(const ParamSet& ps) {
    ema_apply(values, ps, decay);
    ++updates;
}

void EmaShadow::update_ramped(const ParamSet& ps) {
    double n = static_cast<double>(updates);
    ema_apply(values, ps, std::min(decay, (1.0 + n) / (10.0 + n)));
    ++updates;
}

ParamSet EmaShadow::snapshot(const ParamSet& ps) const {
    ParamSet out;
    for (std::size_t i = 0; i < values.size(); ++i) out.add(ps.names[i], values[i]);
    return out;
}

double grad_norm(const std::vector<DenseArray>& grads) {
    double s = 0.0;
    for (const auto& g : grads)
        for (double v : g.data) s += v * v;
    return std::sqrt(s);
}

}  // namespace orchid
