#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "orchidkit/array.hpp"
#include "orchidkit/rng.hpp"
#include "orchidkit/tape.hpp"

namespace orchid {

/// Ordered collection of named parameter arrays. Single source of truth for
/// checkpointing, optimizer state, EMA shadows and parameter hashing.
struct ParamSet {
    std::vector<std::string> names;
    std::vector<DenseArray> values;
    std::unordered_map<std::string, std::size_t> index;

    std::size_t add(const std::string& name, DenseArray init) {
        if (index.count(name)) throw ValueError("ParamSet: duplicate parameter '" + name + "'");
        index[name] = names.size();
        names.push_back(name);
        values.push_back(std::move(init));
        return names.size() - 1;
    }

    DenseArray& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw ValueError("ParamSet: unknown parameter '" + name + "'");
        return values[it->second];
    }

    std::size_t count() const { return values.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values) n += v.size();
        return n;
    }

    std::uint64_t hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::size_t i = 0; i < values.size(); ++i) {
            h = fnv1a64(names[i].data(), names[i].size(), h);
            h = hash_array(values[i], h);
        }
        return h;
    }
};

/// Push every parameter onto a tape as a differentiable leaf (or constant
/// leaf when frozen). Returned ids are parallel to ParamSet order.
std::vector<Tape::Id> push_params(Tape& t, const ParamSet& ps, bool trainable = true);

/// Declarative layer description; `make_param_shapes` is the contract between
/// specs and parameter allocation.
struct LayerSpec {
    enum class Kind {
        Conv2d,
        TransposedConv2d,
        GroupNorm,
        SiluActivation,
        Linear,
        SinusoidalTimeEmbed,
        AvgPool,
        NearestUpsample,
    };
    Kind kind = Kind::Conv2d;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int padding = 1;
    int groups = 1;

    void validate() const;
};

// ---- layer handles: parameter indices into a ParamSet plus hyperparameters

struct Conv2d {
    std::size_t w = 0, b = 0;
    int stride = 1, padding = 1;
    static Conv2d create(ParamSet& ps, const std::string& name, int in_ch, int out_ch, int k,
                         int stride, int padding, RandomStream& rng, double scale = 1.0);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;
};

struct TransposedConv2d {
    std::size_t w = 0, b = 0;
    int stride = 2, padding = 1;
    static TransposedConv2d create(ParamSet& ps, const std::string& name, int in_ch, int out_ch,
                                   int k, int stride, int padding, RandomStream& rng);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;
};

struct GroupNorm {
    std::size_t gamma = 0, beta = 0;
    int groups = 1;
    static GroupNorm create(ParamSet& ps, const std::string& name, int channels, int groups);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;
};

struct Linear {
    std::size_t w = 0, b = 0;
    static Linear create(ParamSet& ps, const std::string& name, int in_f, int out_f,
                         RandomStream& rng, double scale = 1.0);
    Tape::Id apply(Tape& t, const std::vector<Tape::Id>& p, Tape::Id x) const;
};

/// Sinusoidal embedding of a diffusion step: interleaved sin/cos over
/// geometric frequencies spanning [1, 10000]. Deterministic in (t, dim, T).
DenseArray sinusoidal_time_embed(int t, int dim, int T);

/// Group count convention used across the toolkit.
inline int norm_groups(int channels) { return std::min(8, channels); }

// ---- optimization

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First-order adaptive-moment optimizer. step() rejects non-finite gradients
/// and leaves parameters untouched in that case.
struct AdamOptimizer {
    AdamConfig cfg;
    std::int64_t step_count = 0;
    std::vector<DenseArray> m, v;

    void init(const ParamSet& ps);
    bool step(ParamSet& ps, const std::vector<DenseArray>& grads);
};

/// Exponential moving average shadow of a ParamSet.
struct EmaShadow {
    double decay = 0.999;
    std::int64_t updates = 0;
    std::vector<DenseArray> values;

    void init(const ParamSet& ps);
    void update(const ParamSet& ps);  // applies `decay` exactly
    /// Warmup-ramped update min(decay, (1+n)/(10+n)); keeps the shadow from
    /// dragging its random initialization through short training runs.
    void update_ramped(const ParamSet& ps);
    /// View shadow values as a ParamSet (names shared with the source).
    ParamSet snapshot(const ParamSet& ps) const;
};

/// Global L2 norm over a gradient list.
double grad_norm(const std::vector<DenseArray>& grads);

}  // namespace orchid
