#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "orchidkit/array.hpp"

namespace orchid {

class GradientError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reverse-mode automatic differentiation over DenseArray values.
///
/// Nodes are recorded in forward order; backward() walks them once in reverse
/// and accumulates adjoints. Values are immutable once recorded. A fresh Tape
/// is built per training step.
class Tape {
public:
    using Id = std::int32_t;

    /// Constant input: no gradient is propagated into it.
    Id leaf(DenseArray v, const char* kind = "leaf");
    /// Differentiable leaf (parameter or checked input).
    Id param(DenseArray v, const char* kind = "param");

    const DenseArray& value(Id id) const { return nodes_[id].value; }
    std::size_t node_count() const { return nodes_.size(); }
    bool requires_grad(Id id) const { return nodes_[id].requires_grad; }

    // ---- elementwise, same shape ----
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);

    // ---- elementwise, unary ----
    Id scale(Id a, double s);
    Id add_scalar(Id a, double s);
    Id neg(Id a) { return scale(a, -1.0); }
    Id square(Id a);
    Id abs(Id a);
    Id exponential(Id a);
    Id sigmoid(Id a);
    Id silu(Id a);
    Id softplus(Id a);
    Id clamp(Id a, double lo, double hi);

    // ---- reductions ----
    Id sum(Id a);
    Id mean(Id a);

    // ---- shape plumbing ----
    Id reshape(Id a, std::vector<std::size_t> shape);
    Id concat_channels(Id a, Id b);                       // [Ca,H,W]+[Cb,H,W]
    Id slice_channels(Id a, std::size_t c0, std::size_t c1);  // [c0,c1)
    Id detach(Id a);                                      // stop-gradient copy

    // ---- spatial / neural primitives, x is [C,H,W] ----
    Id conv2d(Id x, Id w, Id b, int stride, int padding);
    Id conv2d_transpose(Id x, Id w, Id b, int stride, int padding);
    Id group_norm(Id x, Id gamma, Id beta, int groups, double eps = 1e-5);
    Id avg_pool2(Id x);
    Id upsample_nearest2(Id x);
    Id add_channel_bias(Id x, Id v);        // v is [C]
    Id affine_channel(Id x, Id gain, Id bias);  // x * (1 + gain[c]) + bias[c]
    Id pixel_norm(Id x, double eps = 1e-12);  // [C,H,W] -> [H,W] channelwise L2
    Id unit_normalize_channels(Id x, double eps = 1e-12);
    Id spatial_diff_x(Id x);                // forward difference, [C,H,W] -> [C,H,W-1]
    Id spatial_diff_y(Id x);                // [C,H,W] -> [C,H-1,W]

    // ---- dense algebra ----
    Id linear(Id x, Id w, Id b);            // x [N,Fin] or [Fin]; w [Fout,Fin]; b [Fout]
    Id matmul(Id a, Id b);                  // [N,K]x[K,M]
    Id transpose2(Id a);                    // [N,M] -> [M,N]
    Id softmax_rows(Id a);                  // softmax along last axis of [N,M]
    Id rows_sum(Id table, std::vector<std::size_t> rows);  // sum of selected rows of [V,D]

    /// Backward pass from a scalar node. Fills adjoints for all reachable
    /// nodes with requires_grad. Throws GradientError on non-scalar roots or
    /// non-finite adjoints (reporting the originating node kind).
    void backward(Id root, const std::vector<Id>& stops = {});
    /// Adjoint of a node after backward(); zeros if it never received one.
    DenseArray adjoint(Id id) const;
    void clear_adjoints();

    /// Convenience: backward + gather adjoints for the given leaves, then
    /// clear. Usable repeatedly with different roots on one tape. Nodes in
    /// `stops` act as leaves: their adjoints are not propagated further.
    std::vector<DenseArray> gradients(Id root, const std::vector<Id>& leaves,
                                      const std::vector<Id>& stops = {});

private:
    struct Node {
        DenseArray value;
        const char* kind;
        bool requires_grad = false;
        std::function<void(Tape&, Id)> backward;  // pulls adjoint(id), pushes to inputs
    };

    Id push(DenseArray v, const char* kind, bool req, std::function<void(Tape&, Id)> back);
    DenseArray& grad_buffer(Id id);
    void accumulate(Id id, const DenseArray& g);

    std::vector<Node> nodes_;
    std::vector<DenseArray> adjoints_;  // empty array = no adjoint yet

    friend struct TapeBackdoor;
};

}  // namespace orchid
