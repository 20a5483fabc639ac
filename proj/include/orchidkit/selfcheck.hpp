#pragma once

#include <functional>
#include <string>
#include <vector>

#include "orchidkit/array.hpp"
#include "orchidkit/tape.hpp"

namespace orchid {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

/// Central-difference gradient check over registered leaves. Relative error
/// uses max(|fd|, |ad|, 1e-3) as the denominator; coordinates may be
/// subsampled for large leaves (fixed-seed selection).
double fd_max_rel_error(std::vector<DenseArray>& leaves,
                        const std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>& build,
                        int max_coords_per_leaf = -1, std::uint64_t coord_seed = 1,
                        double h_scale = 1e-5);

// Individual property checks; each maps onto an acceptance criterion.
CheckResult check_layer_gradients();     // differentiable layer kinds vs finite differences
CheckResult check_loss_gradients();      // every vae loss term vs finite differences
CheckResult check_preprocess();          // depth preprocessing invariants + hand case
CheckResult check_schedule_suite();      // schedule tables, conversions, DDIM oracle, moments
CheckResult check_gradient_partition();  // three-way update rule isolation
CheckResult check_guidance();            // classifier-free guidance identities
CheckResult check_inpaint_contract();    // masked-merge fidelity and degenerate modes
CheckResult check_pca();                 // latent redundancy fixtures
CheckResult check_roundtrips();          // container + checkpoint bit-exactness

/// The full fast property suite (everything above).
std::vector<CheckResult> run_property_suite();

/// Render a pass/fail table.
std::string format_results(const std::vector<CheckResult>& results);

}  // namespace orchid
