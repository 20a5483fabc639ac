#pragma once

#include <string>
#include <vector>

#include "orchidkit/array.hpp"
#include "orchidkit/geometry.hpp"

namespace orchid {

struct DepthReport {
    double abs_rel = 0.0;
    double delta1 = 0.0;  // percentage in [0,100]
    std::size_t sample_count = 0;
    std::size_t valid_pixel_count = 0;
};

struct NormalReport {
    double mean_deg = 0.0;
    double pct_below_11_25 = 0.0;
    std::size_t sample_count = 0;
    std::size_t valid_pixel_count = 0;
};

struct ConsistencyReport {
    double mean_e = 0.0;
    std::vector<double> per_sample;
    std::size_t skipped = 0;
};

struct DepthMetricsOptions {
    bool align = true;  // least-squares affine alignment in inverse-depth space
};

/// AbsRel and delta1 for one sample. With alignment enabled `pred` is
/// affine-invariant inverse depth (aligned via align_affine); with alignment
/// disabled `pred` is compared directly as metric depth.
DepthReport depth_metrics(const DenseArray& pred, const MetricDepth& gt,
                          const DepthMetricsOptions& opts = {});

/// Per-pixel angular error in degrees; mean and percentage below 11.25.
NormalReport normal_metrics(const NormalMap& pred, const NormalMap& gt);

/// Dataset aggregation: per-image metrics averaged over images.
DepthReport aggregate_depth(const std::vector<DepthReport>& reports);
NormalReport aggregate_normal(const std::vector<NormalReport>& reports);

struct ConsistencyInput {
    DenseArray pred_inv_depth;  // [H,W], affine-invariant inverse depth
    NormalMap pred_normals;
    MetricDepth gt_depth;  // used for alignment only
    Intrinsics intrinsics;
};

/// Per-sample depth_normal_inconsistency after alignment; failures are
/// recorded, the sample skipped, and the skip count reported.
ConsistencyReport consistency_table(const std::vector<ConsistencyInput>& samples);

/// Smallest k whose leading eigenvalues of the channel covariance of pooled
/// latent vectors explain at least variance_target of the total.
int latent_pca_redundancy(const std::vector<DenseArray>& latents, double variance_target);

/// Eigenvalues of the pooled channel covariance, descending.
std::vector<double> latent_pca_spectrum(const std::vector<DenseArray>& latents);

std::string depth_report_json(const DepthReport& r);
std::string normal_report_json(const NormalReport& r);
std::string consistency_report_json(const ConsistencyReport& r);
std::string depth_report_csv(const DepthReport& r);
std::string normal_report_csv(const NormalReport& r);
std::string consistency_report_csv(const ConsistencyReport& r);

}  // namespace orchid
