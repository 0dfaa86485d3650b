#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "petal/errors.hpp"
#include "petal/tensor.hpp"

namespace petal {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_param = 0;   // index into the flattened parameter list
    std::size_t worst_coord = 0;   // flat index within that parameter
    std::size_t checked = 0;
    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Central-difference validation of reverse-mode gradients.
//
// `loss_fn` must re-run the full forward pass from the current parameter
// values and return a scalar; it must not capture stale intermediate
// tensors. The function is probed twice at the unperturbed point first:
// any discrepancy means the loss is nondeterministic and the comparison
// would be meaningless, so that case throws OracleError instead of
// reporting misleading errors.
template <typename T>
GradCheckReport finite_diff_check(std::vector<Tensor<T>> params,
                                  const std::function<Tensor<T>()>& loss_fn,
                                  T h = T(1e-4)) {
    static_assert(std::is_floating_point_v<T>);
    for (auto& p : params) p.set_requires_grad(true);

    const double base1 = static_cast<double>(loss_fn().item());
    const double base2 = static_cast<double>(loss_fn().item());
    if (base1 != base2) {
        throw OracleError("loss function is not deterministic: " + std::to_string(base1) +
                          " vs " + std::to_string(base2));
    }

    GradTape<T> tape;
    {
        auto scope = tape.activate();
        for (auto& p : params) p.zero_grad();
        auto loss = loss_fn();
        tape.backward(loss);
    }
    tape.reset();

    GradCheckReport rep;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        const std::vector<T> analytic = p.grad();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T orig = p.values()[i];
            p.values()[i] = orig + h;
            const double up = static_cast<double>(loss_fn().item());
            p.values()[i] = orig - h;
            const double down = static_cast<double>(loss_fn().item());
            p.values()[i] = orig;  // restore exact bits
            const double fd = (up - down) / (2.0 * static_cast<double>(h));
            const double an = static_cast<double>(analytic[i]);
            // Relative above the floor, absolute below it: parameters with a
            // structurally zero gradient (e.g. a shift-invariant bias) would
            // otherwise divide finite-difference noise by zero.
            const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 0.01});
            ++rep.checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = pi;
                rep.worst_coord = i;
            }
        }
    }
    return rep;
}

}  // namespace petal
