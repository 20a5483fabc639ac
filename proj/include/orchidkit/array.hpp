#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace orchid {

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ValueError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense n-dimensional array of f64 values in row-major order. The universal
/// value carrier for rasters, latents, parameters and gradients.
struct DenseArray {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    DenseArray() = default;

    explicit DenseArray(std::vector<std::size_t> s, double fill = 0.0)
        : shape(std::move(s)), data(count(shape), fill) {}

    static DenseArray scalar(double v) {
        DenseArray a({1});
        a.data[0] = v;
        return a;
    }

    static DenseArray from(std::vector<std::size_t> s, std::vector<double> values) {
        DenseArray a;
        a.shape = std::move(s);
        a.data = std::move(values);
        if (count(a.shape) != a.data.size())
            throw ShapeError("DenseArray::from: " + std::to_string(a.data.size()) +
                             " values for shape of " + std::to_string(count(a.shape)));
        return a;
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t extent(std::size_t axis) const {
        if (axis >= shape.size()) throw ShapeError("extent: axis out of range");
        return shape[axis];
    }

    bool same_shape(const DenseArray& o) const { return shape == o.shape; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    // [H,W] indexing
    double& at(std::size_t y, std::size_t x) { return data[y * shape[1] + x]; }
    double at(std::size_t y, std::size_t x) const { return data[y * shape[1] + x]; }

    // [C,H,W] indexing
    double& at(std::size_t c, std::size_t y, std::size_t x) {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data[(c * shape[1] + y) * shape[2] + x];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    std::string shape_string() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void require_same_shape(const DenseArray& a, const DenseArray& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
}

// In-place and value helpers used by samplers and training loops (no autodiff).

inline DenseArray operator+(const DenseArray& a, const DenseArray& b) {
    require_same_shape(a, b, "add");
    DenseArray r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.data[i] += b.data[i];
    return r;
}

inline DenseArray operator-(const DenseArray& a, const DenseArray& b) {
    require_same_shape(a, b, "sub");
    DenseArray r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.data[i] -= b.data[i];
    return r;
}

inline DenseArray operator*(const DenseArray& a, double s) {
    DenseArray r = a;
    for (double& v : r.data) v *= s;
    return r;
}

inline DenseArray operator*(double s, const DenseArray& a) { return a * s; }

/// r += s * a
inline void axpy(DenseArray& r, double s, const DenseArray& a) {
    require_same_shape(r, a, "axpy");
    for (std::size_t i = 0; i < r.size(); ++i) r.data[i] += s * a.data[i];
}

inline double max_abs(const DenseArray& a) {
    double m = 0.0;
    for (double v : a.data) m = std::max(m, std::abs(v));
    return m;
}

inline double max_abs_diff(const DenseArray& a, const DenseArray& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace orchid
