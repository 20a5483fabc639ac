#pragma once

#include <cstdint>
#include <vector>

#include "orchidkit/array.hpp"

namespace orchid {

class GeometryError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Per-pixel boolean validity mask.
struct BoolMask {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> m;

    BoolMask() = default;
    BoolMask(std::size_t h_, std::size_t w_, bool fill = true) : h(h_), w(w_), m(h_ * w_, fill ? 1 : 0) {}

    bool at(std::size_t y, std::size_t x) const { return m[y * w + x] != 0; }
    void set(std::size_t y, std::size_t x, bool v) { m[y * w + x] = v ? 1 : 0; }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : m) n += (v != 0);
        return n;
    }
    BoolMask intersect(const BoolMask& o) const {
        if (h != o.h || w != o.w) throw ShapeError("BoolMask::intersect: size mismatch");
        BoolMask r(h, w);
        for (std::size_t i = 0; i < m.size(); ++i) r.m[i] = (m[i] && o.m[i]) ? 1 : 0;
        return r;
    }
};

/// Metric depth in meters; valid entries strictly positive and finite.
struct MetricDepth {
    DenseArray values;  // [H,W]
    BoolMask valid;
};

/// Preprocessed unitless inverse depth: min over valid pixels is 0.
struct ModelDepth {
    DenseArray values;  // [H,W]
    BoolMask valid;
    double d_sigma = 0.0;
    double d_prime_min = 0.0;
    bool degenerate = false;  // d_sigma hit the epsilon floor (constant depth)
};

/// Unit surface normals, camera-facing convention n_z <= 0.
struct NormalMap {
    DenseArray vectors;  // [3,H,W]
    BoolMask valid;
};

struct Intrinsics {
    double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
};

inline constexpr double kSigmaFloor = 1e-9;
inline constexpr double kDepthClampMin = 1e-3;
inline constexpr double kDepthClampMax = 1e4;

/// Inverse depth normalized by mean absolute deviation around the median and
/// shifted so the minimum over valid pixels is exactly zero. Statistics use
/// valid pixels only; invalid pixels carry 0 and stay masked.
ModelDepth preprocess_depth(const MetricDepth& d);

/// p(u,v) = d(u,v) * ((u-cx)/fx, (v-cy)/fy, 1); camera looks down +z.
DenseArray depth_to_pointcloud(const MetricDepth& d, const Intrinsics& K);

/// Central-difference gradients of the pointcloud, cross product, normalized,
/// oriented camera-facing (flip when n . p > 0). Borders use one-sided
/// differences; degenerate pixels are marked invalid.
NormalMap normals_from_pointcloud(const DenseArray& p, const BoolMask& valid);
NormalMap normals_from_pointcloud(const DenseArray& p);

struct InconsistencyResult {
    double mean = 0.0;
    DenseArray per_pixel;  // [H,W], zero where invalid
    BoolMask valid;
};

/// Mean of (1 - n_hat . n)/2 over jointly valid pixels, where n_hat is derived
/// from the pointcloud of the aligned metric depth.
InconsistencyResult depth_normal_inconsistency(const MetricDepth& d_hat_aligned, const NormalMap& n,
                                               const Intrinsics& K);

struct AffineFit {
    double scale = 1.0;
    double shift = 0.0;
};

/// Least-squares fit of (s, b) minimizing sum((s*pred + b - 1/gt)^2) over
/// jointly valid pixels. pred is affine-invariant inverse depth.
AffineFit fit_affine_inverse_depth(const DenseArray& pred, const MetricDepth& gt);

/// Apply the fit and return metric depth 1/(s*pred+b), clamped to
/// [kDepthClampMin, kDepthClampMax].
MetricDepth align_affine(const DenseArray& pred, const MetricDepth& gt);

/// Marks pixels whose 3x3 neighborhood is free of relative depth jumps above
/// `rel_jump` and one pixel away from the raster border. Used to exclude
/// silhouettes from analytic-consistency checks.
BoolMask interior_mask(const MetricDepth& d, double rel_jump = 0.05);

}  // namespace orchid
