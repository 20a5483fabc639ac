#include "orchidkit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace orchid {

namespace {

inline double stable_softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid_fn(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Valid output indices o with 0 <= o*stride + off < extent.
inline void out_range(int extent, int out_extent, int stride, int off, int& lo, int& hi) {
    lo = 0;
    if (off < 0) lo = (-off + stride - 1) / stride;
    int max_i = extent - 1 - off;
    if (max_i < 0) {
        lo = 1;
        hi = 0;
        return;
    }
    hi = std::min(out_extent - 1, max_i / stride);
}

void check_chw(const DenseArray& x, const char* what) {
    if (x.rank() != 3) throw ShapeError(std::string(what) + ": expected [C,H,W], got " + x.shape_string());
}

// Fused 3x3 stride-1 pad-1 forward: one output row stays hot while all input
// channels and kernel rows accumulate into it.
void conv3x3_s1p1(const double* __restrict x, int cin, int h, int w,
                  const double* __restrict wk, const double* __restrict bias, int cout,
                  double* __restrict out) {
    for (int co = 0; co < cout; ++co) {
        const double* wco = wk + static_cast<std::size_t>(co) * cin * 9;
        double b = bias ? bias[co] : 0.0;
        for (int oy = 0; oy < h; ++oy) {
            double* __restrict orow = out + (static_cast<std::size_t>(co) * h + oy) * w;
            for (int i = 0; i < w; ++i) orow[i] = b;
            for (int ci = 0; ci < cin; ++ci) {
                const double* w9 = wco + ci * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    int iy = oy + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const double* __restrict xr =
                        x + (static_cast<std::size_t>(ci) * h + iy) * w;
                    double w0 = w9[ky * 3], w1 = w9[ky * 3 + 1], w2 = w9[ky * 3 + 2];
                    orow[0] += w1 * xr[0] + w2 * xr[1];
                    for (int ox = 1; ox < w - 1; ++ox)
                        orow[ox] += w0 * xr[ox - 1] + w1 * xr[ox] + w2 * xr[ox + 1];
                    orow[w - 1] += w0 * xr[w - 2] + w1 * xr[w - 1];
                }
            }
        }
    }
}

// Weight gradient for the same shape: three independent reduction chains per
// kernel row, so the FMA latency overlaps without FP reassociation.
void conv3x3_s1p1_gradw(const double* __restrict x, int cin, int h, int w,
                        const double* __restrict g, int cout, double* __restrict gw) {
    for (int co = 0; co < cout; ++co) {
        const double* gplane = g + static_cast<std::size_t>(co) * h * w;
        for (int ci = 0; ci < cin; ++ci) {
            const double* xplane = x + static_cast<std::size_t>(ci) * h * w;
            double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
            for (int oy = 0; oy < h; ++oy) {
                const double* __restrict grow = gplane + static_cast<std::size_t>(oy) * w;
                for (int ky = 0; ky < 3; ++ky) {
                    int iy = oy + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const double* __restrict xr = xplane + static_cast<std::size_t>(iy) * w;
                    double s0a = 0, s0b = 0, s1a = 0, s1b = 0, s2a = 0, s2b = 0;
                    int ox = 1;
                    for (; ox + 1 < w - 1; ox += 2) {
                        s0a += grow[ox] * xr[ox - 1];
                        s1a += grow[ox] * xr[ox];
                        s2a += grow[ox] * xr[ox + 1];
                        s0b += grow[ox + 1] * xr[ox];
                        s1b += grow[ox + 1] * xr[ox + 1];
                        s2b += grow[ox + 1] * xr[ox + 2];
                    }
                    for (; ox < w - 1; ++ox) {
                        s0a += grow[ox] * xr[ox - 1];
                        s1a += grow[ox] * xr[ox];
                        s2a += grow[ox] * xr[ox + 1];
                    }
                    double s0 = s0a + s0b, s1 = s1a + s1b, s2 = s2a + s2b;
                    // border columns
                    s1 += grow[0] * xr[0];
                    s2 += grow[0] * xr[1];
                    s0 += grow[w - 1] * xr[w - 2];
                    s1 += grow[w - 1] * xr[w - 1];
                    acc[ky * 3] += s0;
                    acc[ky * 3 + 1] += s1;
                    acc[ky * 3 + 2] += s2;
                }
            }
            double* dst = gw + (static_cast<std::size_t>(co) * cin + ci) * 9;
            for (int i = 0; i < 9; ++i) dst[i] += acc[i];
        }
    }
}

// Input gradient via the flipped-kernel identity: dx = conv(g, flip(w)^T).
void conv3x3_s1p1_gradx(const double* __restrict g, int cout, int h, int w,
                        const double* __restrict wk, int cin, double* __restrict gx) {
    std::vector<double> flipped(static_cast<std::size_t>(cin) * cout * 9);
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
            for (int i = 0; i < 9; ++i)
                flipped[(static_cast<std::size_t>(ci) * cout + co) * 9 + (8 - i)] =
                    wk[(static_cast<std::size_t>(co) * cin + ci) * 9 + i];
    conv3x3_s1p1(g, cout, h, w, flipped.data(), nullptr, cin, gx);
}

}  // namespace

Tape::Id Tape::push(DenseArray v, const char* kind, bool req, std::function<void(Tape&, Id)> back) {
    nodes_.push_back(Node{std::move(v), kind, req, std::move(back)});
    return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::leaf(DenseArray v, const char* kind) { return push(std::move(v), kind, false, nullptr); }

Tape::Id Tape::param(DenseArray v, const char* kind) { return push(std::move(v), kind, true, nullptr); }

DenseArray& Tape::grad_buffer(Id id) {
    if (adjoints_[id].data.empty()) adjoints_[id] = DenseArray(nodes_[id].value.shape, 0.0);
    return adjoints_[id];
}

void Tape::accumulate(Id id, const DenseArray& g) {
    if (!nodes_[id].requires_grad) return;
    DenseArray& a = grad_buffer(id);
    require_same_shape(a, g, "accumulate");
    for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += g.data[i];
}

void Tape::clear_adjoints() { adjoints_.clear(); }

DenseArray Tape::adjoint(Id id) const {
    if (id < static_cast<Id>(adjoints_.size()) && !adjoints_[id].data.empty()) return adjoints_[id];
    return DenseArray(nodes_[id].value.shape, 0.0);
}

void Tape::backward(Id root, const std::vector<Id>& stops) {
    if (nodes_[root].value.size() != 1)
        throw GradientError("backward: loss node must be scalar, got shape " +
                            nodes_[root].value.shape_string());
    adjoints_.assign(nodes_.size(), DenseArray{});
    if (!nodes_[root].requires_grad) return;  // constant loss: all gradients zero
    grad_buffer(root).data[0] = 1.0;
    for (Id id = root; id >= 0; --id) {
        if (adjoints_[id].data.empty()) continue;
        if (!adjoints_[id].all_finite())
            throw GradientError(std::string("backward: non-finite gradient at node kind '") +
                                nodes_[id].kind + "'");
        if (!stops.empty() && std::find(stops.begin(), stops.end(), id) != stops.end()) continue;
        if (nodes_[id].backward) nodes_[id].backward(*this, id);
    }
}

std::vector<DenseArray> Tape::gradients(Id root, const std::vector<Id>& leaves,
                                        const std::vector<Id>& stops) {
    backward(root, stops);
    std::vector<DenseArray> out;
    out.reserve(leaves.size());
    for (Id l : leaves) out.push_back(adjoint(l));
    clear_adjoints();
    return out;
}

// ---------------------------------------------------------------------------
// elementwise

Tape::Id Tape::add(Id a, Id b) {
    require_same_shape(value(a), value(b), "add");
    DenseArray v = value(a);
    const DenseArray& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] += vb.data[i];
    bool req = requires_grad(a) || requires_grad(b);
    return push(std::move(v), "add", req, [a, b](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Tape::Id Tape::sub(Id a, Id b) {
    require_same_shape(value(a), value(b), "sub");
    DenseArray v = value(a);
    const DenseArray& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] -= vb.data[i];
    bool req = requires_grad(a) || requires_grad(b);
    return push(std::move(v), "sub", req, [a, b](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        t.accumulate(a, g);
        if (t.nodes_[b].requires_grad) {
            DenseArray gn = g;
            for (double& x : gn.data) x = -x;
            t.accumulate(b, gn);
        }
    });
}

Tape::Id Tape::mul(Id a, Id b) {
    require_same_shape(value(a), value(b), "mul");
    DenseArray v = value(a);
    const DenseArray& vb = value(b);
    for (std::size_t i = 0; i < v.size(); ++i) v.data[i] *= vb.data[i];
    bool req = requires_grad(a) || requires_grad(b);
    return push(std::move(v), "mul", req, [a, b](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        if (t.nodes_[a].requires_grad) {
            DenseArray ga = g;
            const DenseArray& vb = t.value(b);
            for (std::size_t i = 0; i < ga.size(); ++i) ga.data[i] *= vb.data[i];
            t.accumulate(a, ga);
        }
        if (t.nodes_[b].requires_grad) {
            DenseArray gb = g;
            const DenseArray& va = t.value(a);
            for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] *= va.data[i];
            t.accumulate(b, gb);
        }
    });
}

Tape::Id Tape::scale(Id a, double s) {
    DenseArray v = value(a);
    for (double& x : v.data) x *= s;
    return push(std::move(v), "scale", requires_grad(a), [a, s](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        for (double& x : g.data) x *= s;
        t.accumulate(a, g);
    });
}

Tape::Id Tape::add_scalar(Id a, double s) {
    DenseArray v = value(a);
    for (double& x : v.data) x += s;
    return push(std::move(v), "add_scalar", requires_grad(a),
                [a](Tape& t, Id self) { t.accumulate(a, t.adjoints_[self]); });
}

Tape::Id Tape::square(Id a) {
    DenseArray v = value(a);
    for (double& x : v.data) x *= x;
    return push(std::move(v), "square", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& va = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= 2.0 * va.data[i];
        t.accumulate(a, g);
    });
}

Tape::Id Tape::abs(Id a) {
    DenseArray v = value(a);
    for (double& x : v.data) x = std::abs(x);
    return push(std::move(v), "abs", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& va = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            g.data[i] *= (va.data[i] > 0.0 ? 1.0 : (va.data[i] < 0.0 ? -1.0 : 0.0));
        t.accumulate(a, g);
    });
}

Tape::Id Tape::exponential(Id a) {
    DenseArray v = value(a);
    for (double& x : v.data) x = std::exp(x);
    return push(std::move(v), "exp", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& y = t.value(self);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= y.data[i];
        t.accumulate(a, g);
    });
}

Tape::Id Tape::sigmoid(Id a) {
    DenseArray v = value(a);
    for (double& x : v.data) x = sigmoid_fn(x);
    return push(std::move(v), "sigmoid", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& y = t.value(self);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= y.data[i] * (1.0 - y.data[i]);
        t.accumulate(a, g);
    });
}

Tape::Id Tape::silu(Id a) {
    DenseArray v = value(a);
    for (double& x : v.data) x = x * sigmoid_fn(x);
    return push(std::move(v), "silu", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& x = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            double s = sigmoid_fn(x.data[i]);
            g.data[i] *= s * (1.0 + x.data[i] * (1.0 - s));
        }
        t.accumulate(a, g);
    });
}

Tape::Id Tape::softplus(Id a) {
    DenseArray v = value(a);
    for (double& x : v.data) x = stable_softplus(x);
    return push(std::move(v), "softplus", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& x = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] *= sigmoid_fn(x.data[i]);
        t.accumulate(a, g);
    });
}

Tape::Id Tape::clamp(Id a, double lo, double hi) {
    DenseArray v = value(a);
    for (double& x : v.data) x = std::min(std::max(x, lo), hi);
    return push(std::move(v), "clamp", requires_grad(a), [a, lo, hi](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        const DenseArray& x = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x.data[i] < lo || x.data[i] > hi) g.data[i] = 0.0;
        t.accumulate(a, g);
    });
}

// ---------------------------------------------------------------------------
// reductions

Tape::Id Tape::sum(Id a) {
    double s = 0.0;
    for (double x : value(a).data) s += x;
    return push(DenseArray::scalar(s), "sum", requires_grad(a), [a](Tape& t, Id self) {
        double g = t.adjoints_[self].data[0];
        DenseArray ga(t.value(a).shape, g);
        t.accumulate(a, ga);
    });
}

Tape::Id Tape::mean(Id a) {
    const DenseArray& va = value(a);
    double s = 0.0;
    for (double x : va.data) s += x;
    double n = static_cast<double>(va.size());
    return push(DenseArray::scalar(s / n), "mean", requires_grad(a), [a, n](Tape& t, Id self) {
        double g = t.adjoints_[self].data[0] / n;
        DenseArray ga(t.value(a).shape, g);
        t.accumulate(a, ga);
    });
}

// ---------------------------------------------------------------------------
// shape plumbing

Tape::Id Tape::reshape(Id a, std::vector<std::size_t> shape) {
    const DenseArray& va = value(a);
    if (DenseArray::count(shape) != va.size())
        throw ShapeError("reshape: element count mismatch for " + va.shape_string());
    DenseArray v = va;
    v.shape = shape;
    return push(std::move(v), "reshape", requires_grad(a), [a](Tape& t, Id self) {
        DenseArray g = t.adjoints_[self];
        g.shape = t.value(a).shape;
        t.accumulate(a, g);
    });
}

Tape::Id Tape::concat_channels(Id a, Id b) {
    const DenseArray& va = value(a);
    const DenseArray& vb = value(b);
    check_chw(va, "concat_channels");
    check_chw(vb, "concat_channels");
    if (va.shape[1] != vb.shape[1] || va.shape[2] != vb.shape[2])
        throw ShapeError("concat_channels: spatial mismatch " + va.shape_string() + " vs " +
                         vb.shape_string());
    DenseArray v({va.shape[0] + vb.shape[0], va.shape[1], va.shape[2]});
    std::copy(va.data.begin(), va.data.end(), v.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), v.data.begin() + va.size());
    bool req = requires_grad(a) || requires_grad(b);
    return push(std::move(v), "concat_channels", req, [a, b](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& va = t.value(a);
        if (t.nodes_[a].requires_grad) {
            DenseArray ga(va.shape);
            std::copy(g.data.begin(), g.data.begin() + va.size(), ga.data.begin());
            t.accumulate(a, ga);
        }
        if (t.nodes_[b].requires_grad) {
            const DenseArray& vb = t.value(b);
            DenseArray gb(vb.shape);
            std::copy(g.data.begin() + va.size(), g.data.end(), gb.data.begin());
            t.accumulate(b, gb);
        }
    });
}

Tape::Id Tape::slice_channels(Id a, std::size_t c0, std::size_t c1) {
    const DenseArray& va = value(a);
    check_chw(va, "slice_channels");
    if (c0 >= c1 || c1 > va.shape[0]) throw ShapeError("slice_channels: bad range");
    std::size_t plane = va.shape[1] * va.shape[2];
    DenseArray v({c1 - c0, va.shape[1], va.shape[2]});
    std::copy(va.data.begin() + c0 * plane, va.data.begin() + c1 * plane, v.data.begin());
    return push(std::move(v), "slice_channels", requires_grad(a), [a, c0, plane](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        DenseArray ga(t.value(a).shape, 0.0);
        std::copy(g.data.begin(), g.data.end(), ga.data.begin() + c0 * plane);
        t.accumulate(a, ga);
    });
}

Tape::Id Tape::detach(Id a) { return leaf(value(a), "detach"); }

// ---------------------------------------------------------------------------
// convolutions

Tape::Id Tape::conv2d(Id x, Id w, Id b, int stride, int padding) {
    const DenseArray& vx = value(x);
    const DenseArray& vw = value(w);
    const DenseArray& vb = value(b);
    check_chw(vx, "conv2d");
    if (vw.rank() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,k,k], got " + vw.shape_string());
    int cin = static_cast<int>(vx.shape[0]), h = static_cast<int>(vx.shape[1]), wd = static_cast<int>(vx.shape[2]);
    int cout = static_cast<int>(vw.shape[0]), k = static_cast<int>(vw.shape[2]);
    if (static_cast<int>(vw.shape[1]) != cin)
        throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels but kernel expects " +
                         std::to_string(vw.shape[1]));
    if (static_cast<int>(vw.shape[3]) != k) throw ShapeError("conv2d: kernel must be square");
    if (k % 2 == 0) throw ValueError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (stride < 1 || padding < 0) throw ValueError("conv2d: bad stride/padding");
    if (vb.size() != static_cast<std::size_t>(cout)) throw ShapeError("conv2d: bias size mismatch");
    int ho = (h + 2 * padding - k) / stride + 1;
    int wo = (wd + 2 * padding - k) / stride + 1;
    if (ho < 1 || wo < 1) throw ShapeError("conv2d: empty output");

    DenseArray v({static_cast<std::size_t>(cout), static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
    const double* xp = vx.ptr();
    const double* wp = vw.ptr();
    double* op = v.ptr();
    bool fast3 = k == 3 && stride == 1 && padding == 1 && wd >= 2;
    if (fast3) {
        conv3x3_s1p1(xp, cin, h, wd, wp, vb.ptr(), cout, op);
    } else
    for (int co = 0; co < cout; ++co) {
        double bias = vb.data[co];
        double* oc = op + static_cast<std::size_t>(co) * ho * wo;
        for (int i = 0; i < ho * wo; ++i) oc[i] = bias;
        for (int ci = 0; ci < cin; ++ci) {
            const double* xc = xp + static_cast<std::size_t>(ci) * h * wd;
            const double* wc = wp + (static_cast<std::size_t>(co) * cin + ci) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                int oy_lo, oy_hi;
                out_range(h, ho, stride, ky - padding, oy_lo, oy_hi);
                for (int kx = 0; kx < k; ++kx) {
                    double wv = wc[ky * k + kx];
                    if (wv == 0.0) continue;
                    int ox_lo, ox_hi;
                    out_range(wd, wo, stride, kx - padding, ox_lo, ox_hi);
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                        const double* xrow = xc + static_cast<std::size_t>(oy * stride + ky - padding) * wd;
                        double* orow = oc + static_cast<std::size_t>(oy) * wo;
                        if (stride == 1) {
                            const double* xs = xrow + kx - padding;
                            for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * xs[ox];
                        } else {
                            for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                orow[ox] += wv * xrow[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    }

    bool req = requires_grad(x) || requires_grad(w) || requires_grad(b);
    return push(std::move(v), "conv2d", req, [x, w, b, stride, padding](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        const DenseArray& vw = t.value(w);
        int cin = static_cast<int>(vx.shape[0]), h = static_cast<int>(vx.shape[1]), wd = static_cast<int>(vx.shape[2]);
        int cout = static_cast<int>(vw.shape[0]), k = static_cast<int>(vw.shape[2]);
        int ho = static_cast<int>(g.shape[1]), wo = static_cast<int>(g.shape[2]);

        if (t.nodes_[b].requires_grad) {
            DenseArray gb(t.value(b).shape, 0.0);
            for (int co = 0; co < cout; ++co) {
                const double* gc = g.ptr() + static_cast<std::size_t>(co) * ho * wo;
                double s = 0.0;
                for (int i = 0; i < ho * wo; ++i) s += gc[i];
                gb.data[co] = s;
            }
            t.accumulate(b, gb);
        }
        bool fast3 = k == 3 && stride == 1 && padding == 1 && wd >= 2;
        if (t.nodes_[w].requires_grad) {
            DenseArray gw(vw.shape, 0.0);
            if (fast3) {
                conv3x3_s1p1_gradw(vx.ptr(), cin, h, wd, g.ptr(), cout, gw.ptr());
            } else
            for (int co = 0; co < cout; ++co) {
                const double* gc = g.ptr() + static_cast<std::size_t>(co) * ho * wo;
                for (int ci = 0; ci < cin; ++ci) {
                    const double* xc = vx.ptr() + static_cast<std::size_t>(ci) * h * wd;
                    double* wc = gw.ptr() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        int oy_lo, oy_hi;
                        out_range(h, ho, stride, ky - padding, oy_lo, oy_hi);
                        for (int kx = 0; kx < k; ++kx) {
                            int ox_lo, ox_hi;
                            out_range(wd, wo, stride, kx - padding, ox_lo, ox_hi);
                            double s = 0.0;
                            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                                const double* xrow = xc + static_cast<std::size_t>(oy * stride + ky - padding) * wd;
                                const double* grow = gc + static_cast<std::size_t>(oy) * wo;
                                if (stride == 1) {
                                    const double* xs = xrow + kx - padding;
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox) s += grow[ox] * xs[ox];
                                } else {
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        s += grow[ox] * xrow[ox * stride + kx - padding];
                                }
                            }
                            wc[ky * k + kx] += s;
                        }
                    }
                }
            }
            t.accumulate(w, gw);
        }
        if (t.nodes_[x].requires_grad) {
            DenseArray gx(vx.shape, 0.0);
            if (fast3) {
                conv3x3_s1p1_gradx(g.ptr(), cout, h, wd, vw.ptr(), cin, gx.ptr());
                t.accumulate(x, gx);
                return;
            }
            for (int co = 0; co < cout; ++co) {
                const double* gc = g.ptr() + static_cast<std::size_t>(co) * ho * wo;
                for (int ci = 0; ci < cin; ++ci) {
                    double* xc = gx.ptr() + static_cast<std::size_t>(ci) * h * wd;
                    const double* wc = vw.ptr() + (static_cast<std::size_t>(co) * cin + ci) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        int oy_lo, oy_hi;
                        out_range(h, ho, stride, ky - padding, oy_lo, oy_hi);
                        for (int kx = 0; kx < k; ++kx) {
                            double wv = wc[ky * k + kx];
                            if (wv == 0.0) continue;
                            int ox_lo, ox_hi;
                            out_range(wd, wo, stride, kx - padding, ox_lo, ox_hi);
                            for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                                double* xrow = xc + static_cast<std::size_t>(oy * stride + ky - padding) * wd;
                                const double* grow = gc + static_cast<std::size_t>(oy) * wo;
                                if (stride == 1) {
                                    double* xs = xrow + kx - padding;
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox) xs[ox] += wv * grow[ox];
                                } else {
                                    for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                        xrow[ox * stride + kx - padding] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
            t.accumulate(x, gx);
        }
    });
}

Tape::Id Tape::conv2d_transpose(Id x, Id w, Id b, int stride, int padding) {
    const DenseArray& vx = value(x);
    const DenseArray& vw = value(w);
    const DenseArray& vb = value(b);
    check_chw(vx, "conv2d_transpose");
    if (vw.rank() != 4) throw ShapeError("conv2d_transpose: kernel must be [Cin,Cout,k,k]");
    int cin = static_cast<int>(vx.shape[0]), h = static_cast<int>(vx.shape[1]), wd = static_cast<int>(vx.shape[2]);
    int cout = static_cast<int>(vw.shape[1]), k = static_cast<int>(vw.shape[2]);
    if (static_cast<int>(vw.shape[0]) != cin)
        throw ShapeError("conv2d_transpose: input has " + std::to_string(cin) +
                         " channels but kernel expects " + std::to_string(vw.shape[0]));
    if (k % 2 == 0) throw ValueError("conv2d_transpose: kernel size must be odd");
    if (stride < 1 || padding < 0) throw ValueError("conv2d_transpose: bad stride/padding");
    if (vb.size() != static_cast<std::size_t>(cout)) throw ShapeError("conv2d_transpose: bias size mismatch");
    int ho = (h - 1) * stride - 2 * padding + k;
    int wo = (wd - 1) * stride - 2 * padding + k;
    if (ho < 1 || wo < 1) throw ShapeError("conv2d_transpose: empty output");

    DenseArray v({static_cast<std::size_t>(cout), static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)});
    for (int co = 0; co < cout; ++co) {
        double* oc = v.ptr() + static_cast<std::size_t>(co) * ho * wo;
        for (int i = 0; i < ho * wo; ++i) oc[i] = vb.data[co];
    }
    for (int ci = 0; ci < cin; ++ci) {
        const double* xc = vx.ptr() + static_cast<std::size_t>(ci) * h * wd;
        for (int co = 0; co < cout; ++co) {
            double* oc = v.ptr() + static_cast<std::size_t>(co) * ho * wo;
            const double* wc = vw.ptr() + (static_cast<std::size_t>(ci) * cout + co) * k * k;
            for (int ky = 0; ky < k; ++ky) {
                int iy_lo, iy_hi;
                out_range(ho, h, stride, ky - padding, iy_lo, iy_hi);
                for (int kx = 0; kx < k; ++kx) {
                    double wv = wc[ky * k + kx];
                    if (wv == 0.0) continue;
                    int ix_lo, ix_hi;
                    out_range(wo, wd, stride, kx - padding, ix_lo, ix_hi);
                    for (int iy = iy_lo; iy <= iy_hi; ++iy) {
                        const double* xrow = xc + static_cast<std::size_t>(iy) * wd;
                        double* orow = oc + static_cast<std::size_t>(iy * stride + ky - padding) * wo;
                        for (int ix = ix_lo; ix <= ix_hi; ++ix)
                            orow[ix * stride + kx - padding] += wv * xrow[ix];
                    }
                }
            }
        }
    }

    bool req = requires_grad(x) || requires_grad(w) || requires_grad(b);
    return push(std::move(v), "conv2d_transpose", req, [x, w, b, stride, padding](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        const DenseArray& vw = t.value(w);
        int cin = static_cast<int>(vx.shape[0]), h = static_cast<int>(vx.shape[1]), wd = static_cast<int>(vx.shape[2]);
        int cout = static_cast<int>(vw.shape[1]), k = static_cast<int>(vw.shape[2]);
        int ho = static_cast<int>(g.shape[1]), wo = static_cast<int>(g.shape[2]);

        if (t.nodes_[b].requires_grad) {
            DenseArray gb(t.value(b).shape, 0.0);
            for (int co = 0; co < cout; ++co) {
                const double* gc = g.ptr() + static_cast<std::size_t>(co) * ho * wo;
                double s = 0.0;
                for (int i = 0; i < ho * wo; ++i) s += gc[i];
                gb.data[co] = s;
            }
            t.accumulate(b, gb);
        }
        if (t.nodes_[w].requires_grad) {
            DenseArray gw(vw.shape, 0.0);
            for (int ci = 0; ci < cin; ++ci) {
                const double* xc = vx.ptr() + static_cast<std::size_t>(ci) * h * wd;
                for (int co = 0; co < cout; ++co) {
                    const double* gc = g.ptr() + static_cast<std::size_t>(co) * ho * wo;
                    double* wc = gw.ptr() + (static_cast<std::size_t>(ci) * cout + co) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy_lo, iy_hi;
                        out_range(ho, h, stride, ky - padding, iy_lo, iy_hi);
                        for (int kx = 0; kx < k; ++kx) {
                            int ix_lo, ix_hi;
                            out_range(wo, wd, stride, kx - padding, ix_lo, ix_hi);
                            double s = 0.0;
                            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
                                const double* xrow = xc + static_cast<std::size_t>(iy) * wd;
                                const double* grow = gc + static_cast<std::size_t>(iy * stride + ky - padding) * wo;
                                for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                    s += xrow[ix] * grow[ix * stride + kx - padding];
                            }
                            wc[ky * k + kx] += s;
                        }
                    }
                }
            }
            t.accumulate(w, gw);
        }
        if (t.nodes_[x].requires_grad) {
            DenseArray gx(vx.shape, 0.0);
            for (int ci = 0; ci < cin; ++ci) {
                double* xc = gx.ptr() + static_cast<std::size_t>(ci) * h * wd;
                for (int co = 0; co < cout; ++co) {
                    const double* gc = g.ptr() + static_cast<std::size_t>(co) * ho * wo;
                    const double* wc = vw.ptr() + (static_cast<std::size_t>(ci) * cout + co) * k * k;
                    for (int ky = 0; ky < k; ++ky) {
                        int iy_lo, iy_hi;
                        out_range(ho, h, stride, ky - padding, iy_lo, iy_hi);
                        for (int kx = 0; kx < k; ++kx) {
                            double wv = wc[ky * k + kx];
                            if (wv == 0.0) continue;
                            int ix_lo, ix_hi;
                            out_range(wo, wd, stride, kx - padding, ix_lo, ix_hi);
                            for (int iy = iy_lo; iy <= iy_hi; ++iy) {
                                double* xrow = xc + static_cast<std::size_t>(iy) * wd;
                                const double* grow = gc + static_cast<std::size_t>(iy * stride + ky - padding) * wo;
                                for (int ix = ix_lo; ix <= ix_hi; ++ix)
                                    xrow[ix] += wv * grow[ix * stride + kx - padding];
                            }
                        }
                    }
                }
            }
            t.accumulate(x, gx);
        }
    });
}

// ---------------------------------------------------------------------------
// normalization and resampling

Tape::Id Tape::group_norm(Id x, Id gamma, Id beta, int groups, double eps) {
    const DenseArray& vx = value(x);
    check_chw(vx, "group_norm");
    int c = static_cast<int>(vx.shape[0]);
    std::size_t plane = vx.shape[1] * vx.shape[2];
    if (groups < 1 || c % groups != 0)
        throw ValueError("group_norm: channel count " + std::to_string(c) + " not divisible by groups " +
                         std::to_string(groups));
    if (value(gamma).size() != static_cast<std::size_t>(c) || value(beta).size() != static_cast<std::size_t>(c))
        throw ShapeError("group_norm: gamma/beta size mismatch");
    int gc = c / groups;
    std::size_t gsz = static_cast<std::size_t>(gc) * plane;

    DenseArray xhat(vx.shape);
    std::vector<double> inv_std(groups);
    const double* xp = vx.ptr();
    for (int g = 0; g < groups; ++g) {
        const double* base = xp + static_cast<std::size_t>(g) * gsz;
        double m = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) m += base[i];
        m /= static_cast<double>(gsz);
        double var = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) {
            double d = base[i] - m;
            var += d * d;
        }
        var /= static_cast<double>(gsz);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[g] = is;
        double* xh = xhat.ptr() + static_cast<std::size_t>(g) * gsz;
        for (std::size_t i = 0; i < gsz; ++i) xh[i] = (base[i] - m) * is;
    }
    DenseArray v(vx.shape);
    const DenseArray& vg = value(gamma);
    const DenseArray& vbeta = value(beta);
    for (int ch = 0; ch < c; ++ch) {
        const double* xh = xhat.ptr() + static_cast<std::size_t>(ch) * plane;
        double* ov = v.ptr() + static_cast<std::size_t>(ch) * plane;
        double ga = vg.data[ch], be = vbeta.data[ch];
        for (std::size_t i = 0; i < plane; ++i) ov[i] = ga * xh[i] + be;
    }

    bool req = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    auto xhat_saved = std::make_shared<DenseArray>(std::move(xhat));
    auto inv_saved = std::make_shared<std::vector<double>>(std::move(inv_std));
    return push(std::move(v), "group_norm", req,
                [x, gamma, beta, groups, xhat_saved, inv_saved](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        int c = static_cast<int>(vx.shape[0]);
        std::size_t plane = vx.shape[1] * vx.shape[2];
        int gc = c / groups;
        std::size_t gsz = static_cast<std::size_t>(gc) * plane;
        const DenseArray& xh = *xhat_saved;
        const DenseArray& vg = t.value(gamma);

        if (t.nodes_[gamma].requires_grad) {
            DenseArray ggamma(vg.shape, 0.0);
            for (int ch = 0; ch < c; ++ch) {
                const double* gp = g.ptr() + static_cast<std::size_t>(ch) * plane;
                const double* xp = xh.ptr() + static_cast<std::size_t>(ch) * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += gp[i] * xp[i];
                ggamma.data[ch] = s;
            }
            t.accumulate(gamma, ggamma);
        }
        if (t.nodes_[beta].requires_grad) {
            DenseArray gbeta(t.value(beta).shape, 0.0);
            for (int ch = 0; ch < c; ++ch) {
                const double* gp = g.ptr() + static_cast<std::size_t>(ch) * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += gp[i];
                gbeta.data[ch] = s;
            }
            t.accumulate(beta, gbeta);
        }
        if (t.nodes_[x].requires_grad) {
            DenseArray gx(vx.shape, 0.0);
            // dL/dxhat_i = g_i * gamma_c(i)
            for (int grp = 0; grp < groups; ++grp) {
                double sum_gh = 0.0, sum_ghx = 0.0;
                for (int j = 0; j < gc; ++j) {
                    int ch = grp * gc + j;
                    const double* gp = g.ptr() + static_cast<std::size_t>(ch) * plane;
                    const double* xp = xh.ptr() + static_cast<std::size_t>(ch) * plane;
                    double ga = vg.data[ch];
                    for (std::size_t i = 0; i < plane; ++i) {
                        double gh = gp[i] * ga;
                        sum_gh += gh;
                        sum_ghx += gh * xp[i];
                    }
                }
                double n = static_cast<double>(gsz);
                double mean_gh = sum_gh / n;
                double mean_ghx = sum_ghx / n;
                double is = (*inv_saved)[grp];
                for (int j = 0; j < gc; ++j) {
                    int ch = grp * gc + j;
                    const double* gp = g.ptr() + static_cast<std::size_t>(ch) * plane;
                    const double* xp = xh.ptr() + static_cast<std::size_t>(ch) * plane;
                    double* op = gx.ptr() + static_cast<std::size_t>(ch) * plane;
                    double ga = vg.data[ch];
                    for (std::size_t i = 0; i < plane; ++i)
                        op[i] = is * (gp[i] * ga - mean_gh - xp[i] * mean_ghx);
                }
            }
            t.accumulate(x, gx);
        }
    });
}

Tape::Id Tape::avg_pool2(Id x) {
    const DenseArray& vx = value(x);
    check_chw(vx, "avg_pool2");
    std::size_t c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("avg_pool2: extents must be even, got " + vx.shape_string());
    DenseArray v({c, h / 2, w / 2});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h / 2; ++y)
            for (std::size_t xx = 0; xx < w / 2; ++xx)
                v.at(ch, y, xx) = 0.25 * (vx.at(ch, 2 * y, 2 * xx) + vx.at(ch, 2 * y, 2 * xx + 1) +
                                          vx.at(ch, 2 * y + 1, 2 * xx) + vx.at(ch, 2 * y + 1, 2 * xx + 1));
    return push(std::move(v), "avg_pool2", requires_grad(x), [x](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        DenseArray gx(vx.shape, 0.0);
        std::size_t c = g.shape[0], ho = g.shape[1], wo = g.shape[2];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx) {
                    double gv = 0.25 * g.at(ch, y, xx);
                    gx.at(ch, 2 * y, 2 * xx) += gv;
                    gx.at(ch, 2 * y, 2 * xx + 1) += gv;
                    gx.at(ch, 2 * y + 1, 2 * xx) += gv;
                    gx.at(ch, 2 * y + 1, 2 * xx + 1) += gv;
                }
        t.accumulate(x, gx);
    });
}

Tape::Id Tape::upsample_nearest2(Id x) {
    const DenseArray& vx = value(x);
    check_chw(vx, "upsample_nearest2");
    std::size_t c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    DenseArray v({c, h * 2, w * 2});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < 2 * h; ++y)
            for (std::size_t xx = 0; xx < 2 * w; ++xx) v.at(ch, y, xx) = vx.at(ch, y / 2, xx / 2);
    return push(std::move(v), "upsample_nearest2", requires_grad(x), [x](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        DenseArray gx(vx.shape, 0.0);
        std::size_t c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < 2 * h; ++y)
                for (std::size_t xx = 0; xx < 2 * w; ++xx) gx.at(ch, y / 2, xx / 2) += g.at(ch, y, xx);
        t.accumulate(x, gx);
    });
}

Tape::Id Tape::add_channel_bias(Id x, Id v) {
    const DenseArray& vx = value(x);
    const DenseArray& vv = value(v);
    check_chw(vx, "add_channel_bias");
    if (vv.size() != vx.shape[0]) throw ShapeError("add_channel_bias: vector size mismatch");
    DenseArray out = vx;
    std::size_t plane = vx.shape[1] * vx.shape[2];
    for (std::size_t c = 0; c < vx.shape[0]; ++c) {
        double bias = vv.data[c];
        double* p = out.ptr() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bias;
    }
    bool req = requires_grad(x) || requires_grad(v);
    return push(std::move(out), "add_channel_bias", req, [x, v](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        t.accumulate(x, g);
        if (t.nodes_[v].requires_grad) {
            const DenseArray& vx = t.value(x);
            std::size_t plane = vx.shape[1] * vx.shape[2];
            DenseArray gv(t.value(v).shape, 0.0);
            for (std::size_t c = 0; c < vx.shape[0]; ++c) {
                const double* p = g.ptr() + c * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
                gv.data[c] = s;
            }
            t.accumulate(v, gv);
        }
    });
}

Tape::Id Tape::affine_channel(Id x, Id gain, Id bias) {
    const DenseArray& vx = value(x);
    const DenseArray& vg = value(gain);
    const DenseArray& vb = value(bias);
    check_chw(vx, "affine_channel");
    if (vg.size() != vx.shape[0] || vb.size() != vx.shape[0])
        throw ShapeError("affine_channel: gain/bias size mismatch");
    DenseArray out = vx;
    std::size_t plane = vx.shape[1] * vx.shape[2];
    for (std::size_t c = 0; c < vx.shape[0]; ++c) {
        double g = 1.0 + vg.data[c], b = vb.data[c];
        double* p = out.ptr() + c * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * g + b;
    }
    bool req = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
    return push(std::move(out), "affine_channel", req, [x, gain, bias](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        const DenseArray& vg = t.value(gain);
        std::size_t plane = vx.shape[1] * vx.shape[2];
        if (t.nodes_[x].requires_grad) {
            DenseArray gx(vx.shape);
            for (std::size_t c = 0; c < vx.shape[0]; ++c) {
                double gc = 1.0 + vg.data[c];
                const double* gp = g.ptr() + c * plane;
                double* xp = gx.ptr() + c * plane;
                for (std::size_t i = 0; i < plane; ++i) xp[i] = gp[i] * gc;
            }
            t.accumulate(x, gx);
        }
        if (t.nodes_[gain].requires_grad) {
            DenseArray gg(t.value(gain).shape, 0.0);
            for (std::size_t c = 0; c < vx.shape[0]; ++c) {
                const double* gp = g.ptr() + c * plane;
                const double* xp = vx.ptr() + c * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += gp[i] * xp[i];
                gg.data[c] = s;
            }
            t.accumulate(gain, gg);
        }
        if (t.nodes_[bias].requires_grad) {
            DenseArray gb(t.value(bias).shape, 0.0);
            for (std::size_t c = 0; c < vx.shape[0]; ++c) {
                const double* gp = g.ptr() + c * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += gp[i];
                gb.data[c] = s;
            }
            t.accumulate(bias, gb);
        }
    });
}

Tape::Id Tape::pixel_norm(Id x, double eps) {
    const DenseArray& vx = value(x);
    check_chw(vx, "pixel_norm");
    std::size_t c = vx.shape[0], plane = vx.shape[1] * vx.shape[2];
    DenseArray v({vx.shape[1], vx.shape[2]});
    for (std::size_t i = 0; i < plane; ++i) {
        double s = eps;
        for (std::size_t ch = 0; ch < c; ++ch) {
            double xv = vx.data[ch * plane + i];
            s += xv * xv;
        }
        v.data[i] = std::sqrt(s);
    }
    return push(std::move(v), "pixel_norm", requires_grad(x), [x](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        const DenseArray& n = t.value(self);
        std::size_t c = vx.shape[0], plane = n.size();
        DenseArray gx(vx.shape, 0.0);
        for (std::size_t i = 0; i < plane; ++i) {
            double scale = g.data[i] / n.data[i];
            for (std::size_t ch = 0; ch < c; ++ch) gx.data[ch * plane + i] = scale * vx.data[ch * plane + i];
        }
        t.accumulate(x, gx);
    });
}

Tape::Id Tape::unit_normalize_channels(Id x, double eps) {
    const DenseArray& vx = value(x);
    check_chw(vx, "unit_normalize_channels");
    std::size_t c = vx.shape[0], plane = vx.shape[1] * vx.shape[2];
    DenseArray v(vx.shape);
    DenseArray norms({vx.shape[1], vx.shape[2]});
    for (std::size_t i = 0; i < plane; ++i) {
        double s = eps;
        for (std::size_t ch = 0; ch < c; ++ch) {
            double xv = vx.data[ch * plane + i];
            s += xv * xv;
        }
        double n = std::sqrt(s);
        norms.data[i] = n;
        for (std::size_t ch = 0; ch < c; ++ch) v.data[ch * plane + i] = vx.data[ch * plane + i] / n;
    }
    auto saved = std::make_shared<DenseArray>(std::move(norms));
    return push(std::move(v), "unit_normalize_channels", requires_grad(x), [x, saved](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        std::size_t c = vx.shape[0], plane = saved->size();
        DenseArray gx(vx.shape, 0.0);
        for (std::size_t i = 0; i < plane; ++i) {
            double n = saved->data[i];
            double dot = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) dot += g.data[ch * plane + i] * vx.data[ch * plane + i];
            double n3 = n * n * n;
            for (std::size_t ch = 0; ch < c; ++ch)
                gx.data[ch * plane + i] = g.data[ch * plane + i] / n - vx.data[ch * plane + i] * dot / n3;
        }
        t.accumulate(x, gx);
    });
}

Tape::Id Tape::spatial_diff_x(Id x) {
    const DenseArray& vx = value(x);
    check_chw(vx, "spatial_diff_x");
    std::size_t c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    if (w < 2) throw ShapeError("spatial_diff_x: width must be >= 2");
    DenseArray v({c, h, w - 1});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx + 1 < w; ++xx)
                v.at(ch, y, xx) = vx.at(ch, y, xx + 1) - vx.at(ch, y, xx);
    return push(std::move(v), "spatial_diff_x", requires_grad(x), [x](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        DenseArray gx(vx.shape, 0.0);
        std::size_t c = g.shape[0], h = g.shape[1], wo = g.shape[2];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < wo; ++xx) {
                    double gv = g.at(ch, y, xx);
                    gx.at(ch, y, xx + 1) += gv;
                    gx.at(ch, y, xx) -= gv;
                }
        t.accumulate(x, gx);
    });
}

Tape::Id Tape::spatial_diff_y(Id x) {
    const DenseArray& vx = value(x);
    check_chw(vx, "spatial_diff_y");
    std::size_t c = vx.shape[0], h = vx.shape[1], w = vx.shape[2];
    if (h < 2) throw ShapeError("spatial_diff_y: height must be >= 2");
    DenseArray v({c, h - 1, w});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y + 1 < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx)
                v.at(ch, y, xx) = vx.at(ch, y + 1, xx) - vx.at(ch, y, xx);
    return push(std::move(v), "spatial_diff_y", requires_grad(x), [x](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        DenseArray gx(vx.shape, 0.0);
        std::size_t c = g.shape[0], ho = g.shape[1], w = g.shape[2];
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < ho; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    double gv = g.at(ch, y, xx);
                    gx.at(ch, y + 1, xx) += gv;
                    gx.at(ch, y, xx) -= gv;
                }
        t.accumulate(x, gx);
    });
}

// ---------------------------------------------------------------------------
// dense algebra

Tape::Id Tape::linear(Id x, Id w, Id b) {
    const DenseArray& vx = value(x);
    const DenseArray& vw = value(w);
    const DenseArray& vb = value(b);
    if (vw.rank() != 2) throw ShapeError("linear: weight must be [Fout,Fin]");
    std::size_t fout = vw.shape[0], fin = vw.shape[1];
    if (vb.size() != fout) throw ShapeError("linear: bias size mismatch");
    bool batched = vx.rank() == 2;
    std::size_t n = batched ? vx.shape[0] : 1;
    std::size_t xf = batched ? vx.shape[1] : vx.size();
    if (xf != fin)
        throw ShapeError("linear: input features " + std::to_string(xf) + " but weight expects " +
                         std::to_string(fin));

    DenseArray v(batched ? std::vector<std::size_t>{n, fout} : std::vector<std::size_t>{fout});
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = vx.ptr() + r * fin;
        double* vr = v.ptr() + r * fout;
        for (std::size_t o = 0; o < fout; ++o) {
            const double* wr = vw.ptr() + o * fin;
            double s = vb.data[o];
            for (std::size_t i = 0; i < fin; ++i) s += wr[i] * xr[i];
            vr[o] = s;
        }
    }
    bool req = requires_grad(x) || requires_grad(w) || requires_grad(b);
    return push(std::move(v), "linear", req, [x, w, b, n, fin, fout](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& vx = t.value(x);
        const DenseArray& vw = t.value(w);
        if (t.nodes_[b].requires_grad) {
            DenseArray gb(t.value(b).shape, 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t o = 0; o < fout; ++o) gb.data[o] += g.data[r * fout + o];
            t.accumulate(b, gb);
        }
        if (t.nodes_[w].requires_grad) {
            DenseArray gw(vw.shape, 0.0);
            for (std::size_t r = 0; r < n; ++r) {
                const double* xr = vx.ptr() + r * fin;
                const double* gr = g.ptr() + r * fout;
                for (std::size_t o = 0; o < fout; ++o) {
                    double gv = gr[o];
                    double* wr = gw.ptr() + o * fin;
                    for (std::size_t i = 0; i < fin; ++i) wr[i] += gv * xr[i];
                }
            }
            t.accumulate(w, gw);
        }
        if (t.nodes_[x].requires_grad) {
            DenseArray gx(vx.shape, 0.0);
            for (std::size_t r = 0; r < n; ++r) {
                const double* gr = g.ptr() + r * fout;
                double* xr = gx.ptr() + r * fin;
                for (std::size_t o = 0; o < fout; ++o) {
                    double gv = gr[o];
                    const double* wr = vw.ptr() + o * fin;
                    for (std::size_t i = 0; i < fin; ++i) xr[i] += gv * wr[i];
                }
            }
            t.accumulate(x, gx);
        }
    });
}

Tape::Id Tape::matmul(Id a, Id b) {
    const DenseArray& va = value(a);
    const DenseArray& vb = value(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0])
        throw ShapeError("matmul: incompatible " + va.shape_string() + " x " + vb.shape_string());
    std::size_t n = va.shape[0], k = va.shape[1], m = vb.shape[1];
    DenseArray v({n, m});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < k; ++j) {
            double av = va.data[r * k + j];
            const double* br = vb.ptr() + j * m;
            double* vr = v.ptr() + r * m;
            for (std::size_t cc = 0; cc < m; ++cc) vr[cc] += av * br[cc];
        }
    bool req = requires_grad(a) || requires_grad(b);
    return push(std::move(v), "matmul", req, [a, b, n, k, m](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& va = t.value(a);
        const DenseArray& vb = t.value(b);
        if (t.nodes_[a].requires_grad) {
            DenseArray ga(va.shape, 0.0);  // g * B^T
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < k; ++j) {
                    const double* br = vb.ptr() + j * m;
                    const double* gr = g.ptr() + r * m;
                    double s = 0.0;
                    for (std::size_t cc = 0; cc < m; ++cc) s += gr[cc] * br[cc];
                    ga.data[r * k + j] = s;
                }
            t.accumulate(a, ga);
        }
        if (t.nodes_[b].requires_grad) {
            DenseArray gb(vb.shape, 0.0);  // A^T * g
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t j = 0; j < k; ++j) {
                    double av = va.data[r * k + j];
                    const double* gr = g.ptr() + r * m;
                    double* bj = gb.ptr() + j * m;
                    for (std::size_t cc = 0; cc < m; ++cc) bj[cc] += av * gr[cc];
                }
            t.accumulate(b, gb);
        }
    });
}

Tape::Id Tape::transpose2(Id a) {
    const DenseArray& va = value(a);
    if (va.rank() != 2) throw ShapeError("transpose2: expected rank 2");
    std::size_t n = va.shape[0], m = va.shape[1];
    DenseArray v({m, n});
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) v.data[c * n + r] = va.data[r * m + c];
    return push(std::move(v), "transpose2", requires_grad(a), [a, n, m](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        DenseArray ga({n, m});
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) ga.data[r * m + c] = g.data[c * n + r];
        t.accumulate(a, ga);
    });
}

Tape::Id Tape::softmax_rows(Id a) {
    const DenseArray& va = value(a);
    if (va.rank() != 2) throw ShapeError("softmax_rows: expected rank 2");
    std::size_t n = va.shape[0], m = va.shape[1];
    DenseArray v(va.shape);
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = va.ptr() + r * m;
        double* vr = v.ptr() + r * m;
        double mx = xr[0];
        for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, xr[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            vr[c] = std::exp(xr[c] - mx);
            s += vr[c];
        }
        for (std::size_t c = 0; c < m; ++c) vr[c] /= s;
    }
    return push(std::move(v), "softmax_rows", requires_grad(a), [a, n, m](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        const DenseArray& y = t.value(self);
        DenseArray ga({n, m});
        for (std::size_t r = 0; r < n; ++r) {
            const double* yr = y.ptr() + r * m;
            const double* gr = g.ptr() + r * m;
            double dot = 0.0;
            for (std::size_t c = 0; c < m; ++c) dot += yr[c] * gr[c];
            double* ar = ga.ptr() + r * m;
            for (std::size_t c = 0; c < m; ++c) ar[c] = yr[c] * (gr[c] - dot);
        }
        t.accumulate(a, ga);
    });
}

Tape::Id Tape::rows_sum(Id table, std::vector<std::size_t> rows) {
    const DenseArray& vt = value(table);
    if (vt.rank() != 2) throw ShapeError("rows_sum: table must be [V,D]");
    std::size_t d = vt.shape[1];
    for (std::size_t r : rows)
        if (r >= vt.shape[0]) throw ShapeError("rows_sum: row index out of range");
    DenseArray v({d});
    for (std::size_t r : rows) {
        const double* tr = vt.ptr() + r * d;
        for (std::size_t i = 0; i < d; ++i) v.data[i] += tr[i];
    }
    return push(std::move(v), "rows_sum", requires_grad(table),
                [table, rows = std::move(rows), d](Tape& t, Id self) {
        const DenseArray& g = t.adjoints_[self];
        DenseArray gt(t.value(table).shape, 0.0);
        for (std::size_t r : rows) {
            double* tr = gt.ptr() + r * d;
            for (std::size_t i = 0; i < d; ++i) tr[i] += g.data[i];
        }
        t.accumulate(table, gt);
    });
}

}  // namespace orchid
