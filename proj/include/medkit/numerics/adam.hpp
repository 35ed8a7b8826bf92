#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/numerics/params.hpp"

namespace medkit {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with named parameter groups, each with its own learning rate.
class Adam {
public:
    struct Group {
        std::string name;
        double lr;
        ParamList params;
        std::vector<std::vector<double>> m;
        std::vector<std::vector<double>> v;
    };

    explicit Adam(AdamConfig config = {}) : config_{config} {}

    void add_group(std::string name, double lr, ParamList params) {
        Group g{std::move(name), lr, std::move(params), {}, {}};
        for (const auto& p : g.params) {
            g.m.emplace_back(p.tensor.size(), 0.0);
            g.v.emplace_back(p.tensor.size(), 0.0);
        }
        groups_.push_back(std::move(g));
    }

    const std::vector<Group>& groups() const { return groups_; }
    std::size_t steps() const { return step_; }

    void zero_grad() {
        for (auto& g : groups_) {
            zero_grads(g.params);
        }
    }

    // Parameters without a gradient buffer are skipped.
    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
        for (auto& g : groups_) {
            for (std::size_t k = 0; k < g.params.size(); ++k) {
                Tensor& t = g.params[k].tensor;
                if (!t.has_grad()) {
                    continue;
                }
                auto w = t.mutable_data();
                auto grad = t.grad();
                auto& m = g.m[k];
                auto& v = g.v[k];
                for (std::size_t i = 0; i < w.size(); ++i) {
                    m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * grad[i];
                    v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * grad[i] * grad[i];
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    w[i] -= g.lr * mhat / (std::sqrt(vhat) + config_.eps);
                }
            }
        }
    }

    nlohmann::json state_dump() const {
        nlohmann::json groups = nlohmann::json::array();
        for (const auto& g : groups_) {
            groups.push_back({{"name", g.name},
                              {"lr", g.lr},
                              {"tensors", g.params.size()},
                              {"parameters", parameter_count(g.params)}});
        }
        return {{"optimizer", "adam"},
                {"beta1", config_.beta1},
                {"beta2", config_.beta2},
                {"eps", config_.eps},
                {"step", step_},
                {"groups", groups}};
    }

private:
    AdamConfig config_;
    std::vector<Group> groups_;
    std::size_t step_ = 0;
};

}  // namespace medkit
