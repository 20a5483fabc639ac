#pragma once

// Central-difference gradient oracle for unit tests. Re-evaluates the forward
// graph with perturbed leaves, so it is independent of the backward pass it
// checks.

#include <functional>
#include <vector>

#include "orchidkit/rng.hpp"
#include "orchidkit/tape.hpp"

namespace orchid::testing {

using BuildFn = std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>;

struct FdReport {
    double max_rel = 0.0;
    double loss = 0.0;
};

inline FdReport fd_compare(std::vector<DenseArray> leaves, const BuildFn& build, double h_base = 1e-5) {
    auto eval_grads = [&]() {
        Tape t;
        std::vector<Tape::Id> ids;
        for (auto& l : leaves) ids.push_back(t.param(l));
        Tape::Id loss = build(t, ids);
        return std::make_pair(t.value(loss).data[0], t.gradients(loss, ids));
    };
    auto eval_loss = [&]() {
        Tape t;
        std::vector<Tape::Id> ids;
        for (auto& l : leaves) ids.push_back(t.leaf(l));
        return t.value(build(t, ids)).data[0];
    };
    FdReport rep;
    auto [loss0, grads] = eval_grads();
    rep.loss = loss0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        for (std::size_t i = 0; i < leaves[li].size(); ++i) {
            double orig = leaves[li].data[i];
            double h = h_base * std::max(1.0, std::abs(orig));
            leaves[li].data[i] = orig + h;
            double fp = eval_loss();
            leaves[li].data[i] = orig - h;
            double fm = eval_loss();
            leaves[li].data[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double ad = grads[li].data[i];
            double rel = std::abs(ad - fd) / std::max({std::abs(fd), std::abs(ad), 1e-3});
            rep.max_rel = std::max(rep.max_rel, rel);
        }
    }
    return rep;
}

}  // namespace orchid::testing
