#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "medkit/numerics/rng.hpp"
#include "medkit/numerics/tensor.hpp"

namespace medkit {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

using ParamList = std::vector<NamedParam>;

inline std::size_t parameter_count(const ParamList& params) {
    std::size_t n = 0;
    for (const auto& p : params) {
        n += p.tensor.size();
    }
    return n;
}

inline void zero_grads(ParamList& params) {
    for (auto& p : params) {
        p.tensor.zero_grad();
    }
}

inline void append(ParamList& into, const ParamList& more, const std::string& prefix = {}) {
    for (const auto& p : more) {
        into.push_back({prefix + p.name, p.tensor});
    }
}

// Xavier/Glorot uniform on a [fan_in x fan_out] matrix.
inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> w(fan_in * fan_out);
    for (auto& v : w) {
        v = rng.uniform(-limit, limit);
    }
    return Tensor{Shape{fan_in, fan_out}, std::move(w), true};
}

inline Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

inline Tensor ones_param(std::size_t n) { return Tensor{Shape{n}, std::vector<double>(n, 1.0), true}; }

}  // namespace medkit
