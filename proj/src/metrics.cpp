#include "orchidkit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace orchid {

namespace {

constexpr double kRadToDeg = 57.29577951308232;

/// Jacobi eigenvalue iteration for a small symmetric matrix (row-major n x n).
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n) {
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (off < 1e-24) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[p * n + p], aqq = a[q * n + q];
                double theta = 0.5 * (aqq - app) / apq;
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a[i * n + i];
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

}  // namespace

DepthReport depth_metrics(const DenseArray& pred, const MetricDepth& gt, const DepthMetricsOptions& opts) {
    DepthReport r;
    r.sample_count = 1;
    MetricDepth aligned;
    const MetricDepth* d = nullptr;
    if (opts.align) {
        aligned = align_affine(pred, gt);
        d = &aligned;
    } else {
        if (pred.shape != gt.values.shape) throw ShapeError("depth_metrics: prediction raster mismatch");
        aligned.values = pred;
        aligned.valid = gt.valid;
        d = &aligned;
    }
    double abs_rel = 0.0;
    std::size_t n = 0, below = 0;
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        if (!gt.valid.m[i] || !d->valid.m[i]) continue;
        double p = d->values.data[i], g = gt.values.data[i];
        if (!(p > 0.0)) continue;
        abs_rel += std::abs(p - g) / g;
        double ratio = std::max(p / g, g / p);
        if (ratio < 1.25) ++below;
        ++n;
    }
    if (n == 0) throw GeometryError("depth_metrics: empty joint validity mask");
    r.valid_pixel_count = n;
    r.abs_rel = abs_rel / static_cast<double>(n);
    r.delta1 = 100.0 * static_cast<double>(below) / static_cast<double>(n);
    return r;
}

NormalReport normal_metrics(const NormalMap& pred, const NormalMap& gt) {
    if (pred.vectors.shape != gt.vectors.shape) throw ShapeError("normal_metrics: shape mismatch");
    std::size_t h = pred.vectors.shape[1], w = pred.vectors.shape[2];
    BoolMask joint = pred.valid.intersect(gt.valid);
    double sum = 0.0;
    std::size_t n = 0, below = 0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (!joint.at(y, x)) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < 3; ++c) dot += pred.vectors.at(c, y, x) * gt.vectors.at(c, y, x);
            dot = std::min(1.0, std::max(-1.0, dot));
            double deg = std::acos(dot) * kRadToDeg;
            sum += deg;
            if (deg < 11.25) ++below;
            ++n;
        }
    if (n == 0) throw GeometryError("normal_metrics: empty joint validity mask");
    NormalReport r;
    r.sample_count = 1;
    r.valid_pixel_count = n;
    r.mean_deg = sum / static_cast<double>(n);
    r.pct_below_11_25 = 100.0 * static_cast<double>(below) / static_cast<double>(n);
    return r;
}

DepthReport aggregate_depth(const std::vector<DepthReport>& reports) {
    DepthReport out;
    if (reports.empty()) return out;
    for (const auto& r : reports) {
        out.abs_rel += r.abs_rel;
        out.delta1 += r.delta1;
        out.sample_count += r.sample_count;
        out.valid_pixel_count += r.valid_pixel_count;
    }
    out.abs_rel /= static_cast<double>(reports.size());
    out.delta1 /= static_cast<double>(reports.size());
    return out;
}

NormalReport aggregate_normal(const std::vector<NormalReport>& reports) {
    NormalReport out;
    if (reports.empty()) return out;
    for (const auto& r : reports) {
        out.mean_deg += r.mean_deg;
        out.pct_below_11_25 += r.pct_below_11_25;
        out.sample_count += r.sample_count;
        out.valid_pixel_count += r.valid_pixel_count;
    }
    out.mean_deg /= static_cast<double>(reports.size());
    out.pct_below_11_25 /= static_cast<double>(reports.size());
    return out;
}

ConsistencyReport consistency_table(const std::vector<ConsistencyInput>& samples) {
    ConsistencyReport r;
    double sum = 0.0;
    for (const auto& s : samples) {
        try {
            MetricDepth aligned = align_affine(s.pred_inv_depth, s.gt_depth);
            auto inc = depth_normal_inconsistency(aligned, s.pred_normals, s.intrinsics);
            r.per_sample.push_back(inc.mean);
            sum += inc.mean;
        } catch (const std::exception&) {
            ++r.skipped;
        }
    }
    if (!r.per_sample.empty()) r.mean_e = sum / static_cast<double>(r.per_sample.size());
    return r;
}

std::vector<double> latent_pca_spectrum(const std::vector<DenseArray>& latents) {
    if (latents.size() < 2) throw ValueError("latent_pca_redundancy: need at least 2 samples");
    std::size_t c = latents.front().shape[0];
    for (const auto& z : latents)
        if (z.rank() != 3 || z.shape[0] != c)
            throw ShapeError("latent_pca_redundancy: latents must share a [C,h,w] layout");

    // pool spatial positions of every sample as C-dim vectors
    std::size_t n = 0;
    std::vector<double> mean(c, 0.0);
    for (const auto& z : latents) {
        std::size_t plane = z.shape[1] * z.shape[2];
        n += plane;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = z.ptr() + ch * plane;
            for (std::size_t i = 0; i < plane; ++i) mean[ch] += p[i];
        }
    }
    for (auto& m : mean) m /= static_cast<double>(n);

    std::vector<double> cov(c * c, 0.0);
    for (const auto& z : latents) {
        std::size_t plane = z.shape[1] * z.shape[2];
        for (std::size_t i = 0; i < plane; ++i)
            for (std::size_t a = 0; a < c; ++a) {
                double va = z.data[a * plane + i] - mean[a];
                for (std::size_t b = a; b < c; ++b)
                    cov[a * c + b] += va * (z.data[b * plane + i] - mean[b]);
            }
    }
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a; b < c; ++b) {
            cov[a * c + b] /= static_cast<double>(n - 1);
            cov[b * c + a] = cov[a * c + b];
        }
    return symmetric_eigenvalues(std::move(cov), c);
}

int latent_pca_redundancy(const std::vector<DenseArray>& latents, double variance_target) {
    if (!(variance_target > 0.0) || variance_target > 1.0)
        throw ValueError("latent_pca_redundancy: variance_target must be in (0,1]");
    std::vector<double> ev = latent_pca_spectrum(latents);
    double total = 0.0;
    for (double e : ev) total += std::max(0.0, e);
    if (total <= 0.0) return 1;  // all-constant latents: one basis explains everything
    double acc = 0.0;
    for (std::size_t k = 0; k < ev.size(); ++k) {
        acc += std::max(0.0, ev[k]);
        if (acc >= variance_target * total) return static_cast<int>(k + 1);
    }
    return static_cast<int>(ev.size());
}

std::string depth_report_json(const DepthReport& r) {
    nlohmann::json j{{"abs_rel", r.abs_rel},
                     {"delta1", r.delta1},
                     {"sample_count", r.sample_count},
                     {"valid_pixel_count", r.valid_pixel_count}};
    return j.dump(2);
}

std::string normal_report_json(const NormalReport& r) {
    nlohmann::json j{{"mean_deg", r.mean_deg},
                     {"pct_below_11_25", r.pct_below_11_25},
                     {"sample_count", r.sample_count},
                     {"valid_pixel_count", r.valid_pixel_count}};
    return j.dump(2);
}

std::string consistency_report_json(const ConsistencyReport& r) {
    nlohmann::json j{{"mean_e", r.mean_e}, {"per_sample", r.per_sample}, {"skipped", r.skipped}};
    return j.dump(2);
}

namespace {

std::string csv_table(const std::vector<std::pair<std::string, std::string>>& cols) {
    std::size_t width = 0;
    for (const auto& [h, v] : cols) width = std::max({width, h.size(), v.size()});
    std::ostringstream h1, h2;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) {
            h1 << ", ";
            h2 << ", ";
        }
        h1 << std::string(width - cols[i].first.size(), ' ') << cols[i].first;
        h2 << std::string(width - cols[i].second.size(), ' ') << cols[i].second;
    }
    return h1.str() + "\n" + h2.str() + "\n";
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace

std::string depth_report_csv(const DepthReport& r) {
    return csv_table({{"abs_rel", fmt(r.abs_rel)},
                      {"delta1", fmt(r.delta1)},
                      {"samples", std::to_string(r.sample_count)},
                      {"valid_pixels", std::to_string(r.valid_pixel_count)}});
}

std::string normal_report_csv(const NormalReport& r) {
    return csv_table({{"mean_deg", fmt(r.mean_deg)},
                      {"pct_11.25", fmt(r.pct_below_11_25)},
                      {"samples", std::to_string(r.sample_count)},
                      {"valid_pixels", std::to_string(r.valid_pixel_count)}});
}

std::string consistency_report_csv(const ConsistencyReport& r) {
    std::ostringstream os;
    os << "sample, e_depth_normal\n";
    for (std::size_t i = 0; i < r.per_sample.size(); ++i) os << i << ", " << fmt(r.per_sample[i]) << '\n';
    os << "mean, " << fmt(r.mean_e) << '\n';
    return os.str();
}

}  // namespace orchid
