#include "orchidkit/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace orchid {

namespace {

void check_depth(const MetricDepth& d, const char* what) {
    if (d.values.rank() != 2) throw ShapeError(std::string(what) + ": depth must be [H,W]");
    if (d.valid.h != d.values.shape[0] || d.valid.w != d.values.shape[1])
        throw ShapeError(std::string(what) + ": mask size mismatch");
}

double median_of(std::vector<double> v) {
    std::size_t n = v.size();
    std::size_t mid = n / 2;
    std::nth_element(v.begin(), v.begin() + mid, v.end());
    double hi = v[mid];
    if (n % 2 == 1) return hi;
    std::nth_element(v.begin(), v.begin() + mid - 1, v.begin() + mid);
    return 0.5 * (v[mid - 1] + hi);
}

}  // namespace

ModelDepth preprocess_depth(const MetricDepth& d) {
    check_depth(d, "preprocess_depth");
    std::size_t h = d.values.shape[0], w = d.values.shape[1];
    std::vector<double> inv;
    inv.reserve(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        if (!d.valid.m[i]) continue;
        double v = d.values.data[i];
        if (!(v > 0.0) || !std::isfinite(v))
            throw GeometryError("preprocess_depth: invalid metric depth value on a valid pixel");
        inv.push_back(1.0 / v);
    }
    if (inv.empty()) throw GeometryError("preprocess_depth: no valid pixels");

    double med = median_of(inv);
    double dev = 0.0;
    for (double v : inv) dev += std::abs(v - med);
    dev /= static_cast<double>(inv.size());

    ModelDepth out;
    out.valid = d.valid;
    out.degenerate = dev < kSigmaFloor;
    out.d_sigma = std::max(dev, kSigmaFloor);

    double mn = std::numeric_limits<double>::infinity();
    DenseArray prime({h, w}, 0.0);
    for (std::size_t i = 0; i < h * w; ++i) {
        if (!d.valid.m[i]) continue;
        double v = (1.0 / d.values.data[i]) / out.d_sigma;
        prime.data[i] = v;
        mn = std::min(mn, v);
    }
    out.d_prime_min = mn;
    out.values = DenseArray({h, w}, 0.0);
    for (std::size_t i = 0; i < h * w; ++i)
        if (d.valid.m[i]) out.values.data[i] = prime.data[i] - mn;
    return out;
}

DenseArray depth_to_pointcloud(const MetricDepth& d, const Intrinsics& K) {
    check_depth(d, "depth_to_pointcloud");
    if (!(K.fx > 0.0) || !(K.fy > 0.0))
        throw GeometryError("depth_to_pointcloud: focal lengths must be positive");
    std::size_t h = d.values.shape[0], w = d.values.shape[1];
    DenseArray p({3, h, w}, 0.0);
    for (std::size_t v = 0; v < h; ++v)
        for (std::size_t u = 0; u < w; ++u) {
            if (!d.valid.at(v, u)) continue;
            double z = d.values.at(v, u);
            p.at(0, v, u) = z * (static_cast<double>(u) - K.cx) / K.fx;
            p.at(1, v, u) = z * (static_cast<double>(v) - K.cy) / K.fy;
            p.at(2, v, u) = z;
        }
    return p;
}

NormalMap normals_from_pointcloud(const DenseArray& p, const BoolMask& valid) {
    if (p.rank() != 3 || p.shape[0] != 3) throw ShapeError("normals_from_pointcloud: expected [3,H,W]");
    std::size_t h = p.shape[1], w = p.shape[2];
    if (h < 3 || w < 3) throw GeometryError("normals_from_pointcloud: raster must be at least 3x3");
    if (valid.h != h || valid.w != w) throw ShapeError("normals_from_pointcloud: mask size mismatch");

    NormalMap out;
    out.vectors = DenseArray({3, h, w}, 0.0);
    out.valid = BoolMask(h, w, false);

    auto diff = [&](std::size_t c, std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1,
                    double scale) { return (p.at(c, y1, x1) - p.at(c, y0, x0)) * scale; };

    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!valid.at(y, x)) continue;
            // pick central differences where both neighbors are valid,
            // one-sided otherwise
            std::size_t xl = x > 0 && valid.at(y, x - 1) ? x - 1 : x;
            std::size_t xr = x + 1 < w && valid.at(y, x + 1) ? x + 1 : x;
            std::size_t yu = y > 0 && valid.at(y - 1, x) ? y - 1 : y;
            std::size_t yd = y + 1 < h && valid.at(y + 1, x) ? y + 1 : y;
            if (xl == xr || yu == yd) continue;  // no spatial extent: degenerate

            double sx = 1.0 / static_cast<double>(xr - xl);
            double sy = 1.0 / static_cast<double>(yd - yu);
            double gx[3], gy[3];
            for (std::size_t c = 0; c < 3; ++c) {
                gx[c] = diff(c, y, xl, y, xr, sx);
                gy[c] = diff(c, yu, x, yd, x, sy);
            }
            double n0 = gx[1] * gy[2] - gx[2] * gy[1];
            double n1 = gx[2] * gy[0] - gx[0] * gy[2];
            double n2 = gx[0] * gy[1] - gx[1] * gy[0];
            double len = std::sqrt(n0 * n0 + n1 * n1 + n2 * n2);
            if (!(len > 0.0) || !std::isfinite(len)) continue;  // degenerate gradient
            n0 /= len;
            n1 /= len;
            n2 /= len;
            // orient toward the camera: flip when pointing away from origin
            double dot = n0 * p.at(0, y, x) + n1 * p.at(1, y, x) + n2 * p.at(2, y, x);
            if (dot > 0.0) {
                n0 = -n0;
                n1 = -n1;
                n2 = -n2;
            }
            out.vectors.at(0, y, x) = n0;
            out.vectors.at(1, y, x) = n1;
            out.vectors.at(2, y, x) = n2;
            out.valid.set(y, x, true);
        }
    return out;
}

NormalMap normals_from_pointcloud(const DenseArray& p) {
    if (p.rank() != 3) throw ShapeError("normals_from_pointcloud: expected [3,H,W]");
    return normals_from_pointcloud(p, BoolMask(p.shape[1], p.shape[2], true));
}

InconsistencyResult depth_normal_inconsistency(const MetricDepth& d_hat_aligned, const NormalMap& n,
                                               const Intrinsics& K) {
    check_depth(d_hat_aligned, "depth_normal_inconsistency");
    std::size_t h = d_hat_aligned.values.shape[0], w = d_hat_aligned.values.shape[1];
    if (n.vectors.rank() != 3 || n.vectors.shape[0] != 3 || n.vectors.shape[1] != h ||
        n.vectors.shape[2] != w)
        throw ShapeError("depth_normal_inconsistency: normal map size mismatch");

    DenseArray p = depth_to_pointcloud(d_hat_aligned, K);
    NormalMap derived = normals_from_pointcloud(p, d_hat_aligned.valid);
    BoolMask joint = derived.valid.intersect(n.valid);

    InconsistencyResult r;
    r.per_pixel = DenseArray({h, w}, 0.0);
    r.valid = joint;
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!joint.at(y, x)) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < 3; ++c) dot += derived.vectors.at(c, y, x) * n.vectors.at(c, y, x);
            dot = std::min(1.0, std::max(-1.0, dot));
            double e = 0.5 * (1.0 - dot);
            r.per_pixel.at(y, x) = e;
            sum += e;
            ++cnt;
        }
    if (cnt == 0) throw GeometryError("depth_normal_inconsistency: empty joint validity mask");
    r.mean = sum / static_cast<double>(cnt);
    return r;
}

AffineFit fit_affine_inverse_depth(const DenseArray& pred, const MetricDepth& gt) {
    check_depth(gt, "align_affine");
    if (pred.rank() != 2 || pred.shape != gt.values.shape)
        throw ShapeError("align_affine: prediction raster must match ground truth");
    double spp = 0.0, sp = 0.0, spt = 0.0, st = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!gt.valid.m[i] || !std::isfinite(pred.data[i])) continue;
        double pv = pred.data[i];
        double tv = 1.0 / gt.values.data[i];
        spp += pv * pv;
        sp += pv;
        spt += pv * tv;
        st += tv;
        ++n;
    }
    if (n < 2) throw GeometryError("align_affine: need at least 2 jointly valid pixels");
    double nn = static_cast<double>(n);
    double det = spp * nn - sp * sp;
    double scale_ref = std::max(spp * nn, sp * sp);
    if (!(det > scale_ref * 1e-12))
        throw GeometryError("align_affine: rank-deficient normal equations (constant prediction)");
    AffineFit f;
    f.scale = (spt * nn - sp * st) / det;
    f.shift = (spp * st - sp * spt) / det;
    return f;
}

MetricDepth align_affine(const DenseArray& pred, const MetricDepth& gt) {
    AffineFit f = fit_affine_inverse_depth(pred, gt);
    std::size_t h = gt.values.shape[0], w = gt.values.shape[1];
    MetricDepth out;
    out.values = DenseArray({h, w}, 0.0);
    out.valid = BoolMask(h, w, false);
    for (std::size_t i = 0; i < h * w; ++i) {
        if (!gt.valid.m[i] || !std::isfinite(pred.data[i])) continue;
        double q = f.scale * pred.data[i] + f.shift;
        double d = q > 1.0 / kDepthClampMax ? 1.0 / q : kDepthClampMax;
        d = std::min(std::max(d, kDepthClampMin), kDepthClampMax);
        out.values.data[i] = d;
        out.valid.m[i] = 1;
    }
    return out;
}

BoolMask interior_mask(const MetricDepth& d, double rel_jump) {
    check_depth(d, "interior_mask");
    std::size_t h = d.values.shape[0], w = d.values.shape[1];
    BoolMask out(h, w, false);
    for (std::size_t y = 1; y + 1 < h; ++y)
        for (std::size_t x = 1; x + 1 < w; ++x) {
            if (!d.valid.at(y, x)) continue;
            double c = d.values.at(y, x);
            bool ok = true;
            for (int dy = -1; dy <= 1 && ok; ++dy)
                for (int dx = -1; dx <= 1 && ok; ++dx) {
                    std::size_t ny = y + dy, nx = x + dx;
                    if (!d.valid.at(ny, nx)) {
                        ok = false;
                        break;
                    }
                    double v = d.values.at(ny, nx);
                    if (std::abs(v - c) > rel_jump * std::max(c, 1e-12)) ok = false;
                }
            out.set(y, x, ok);
        }
    return out;
}

}  // namespace orchid
