#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/numerics/params.hpp"
#include "medkit/numerics/rng.hpp"
#include "medkit/numerics/tensor.hpp"

namespace medkit {

struct GradCheckOptions {
    double eps = 1e-4;
    // Upper bound on checked scalars; 0 checks every one.
    std::size_t max_checks = 0;
    std::uint64_t seed = 0;
};

// Compares the analytic gradient of `loss_fn` against central differences.
// Returns max |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over
// the checked scalars.
inline double grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                         GradCheckOptions options = {}) {
    for (auto& p : params) {
        p.zero_grad();
    }
    const Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) {
        throw NumericError("grad_check: non-finite loss");
    }
    backward(loss);

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t t = 0; t < params.size(); ++t) {
        for (std::size_t i = 0; i < params[t].size(); ++i) {
            coords.emplace_back(t, i);
        }
    }
    if (options.max_checks != 0 && coords.size() > options.max_checks) {
        Rng rng{options.seed};
        rng.shuffle(std::span{coords});
        coords.resize(options.max_checks);
    }

    double worst = 0.0;
    NoGradGuard no_grad;
    for (auto [t, i] : coords) {
        Tensor& p = params[t];
        const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
        const double original = p.data()[i];
        p.mutable_data()[i] = original + options.eps;
        const double up = loss_fn().item();
        p.mutable_data()[i] = original - options.eps;
        const double down = loss_fn().item();
        p.mutable_data()[i] = original;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("grad_check: non-finite loss under perturbation");
        }
        const double numeric = (up - down) / (2.0 * options.eps);
        const double err =
            std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

inline std::vector<Tensor> tensors_of(const ParamList& params) {
    std::vector<Tensor> out;
    for (const auto& p : params) {
        out.push_back(p.tensor);
    }
    return out;
}

}  // namespace medkit
