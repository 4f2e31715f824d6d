#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "omtl/autodiff.hpp"
#include "omtl/errors.hpp"
#include "omtl/tensor.hpp"

namespace omtl {

using ParameterMap = std::map<std::string, DenseTensor>;

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam. Moments are created lazily per parameter name, so
/// parameters that never receive a gradient are never touched.
class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    std::uint64_t steps() const { return t_; }
    const DenseTensor* first_moment(const std::string& name) const {
        auto it = m_.find(name);
        return it == m_.end() ? nullptr : &it->second;
    }
    const DenseTensor* second_moment(const std::string& name) const {
        auto it = v_.find(name);
        return it == v_.end() ? nullptr : &it->second;
    }

    /// One update of every parameter for which `trainable(name)` holds.
    /// All gradients are checked before anything is modified.
    void step(ParameterMap& params, const Gradients& grads,
              const std::function<bool(const std::string&)>& trainable = {}) {
        for (const auto& [name, g] : grads) {
            auto it = params.find(name);
            if (it == params.end()) throw ValidationError("adam: gradient for unknown parameter '" + name + "'");
            require_shape(it->second.shape() == g.shape(), "adam", it->second.shape(), g.shape());
            if (!g.all_finite()) throw NumericalError("adam: non-finite gradient for parameter '" + name + "'");
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            if (trainable && !trainable(name)) continue;
            DenseTensor& w = params.at(name);
            auto [mit, m_new] = m_.try_emplace(name, g.rows(), g.cols());
            auto [vit, v_new] = v_.try_emplace(name, g.rows(), g.cols());
            DenseTensor& m = mit->second;
            DenseTensor& v = vit->second;
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
                v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
                const double m_hat = m[i] / bc1;
                const double v_hat = v[i] / bc2;
                w[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
            }
        }
    }

private:
    AdamConfig config_;
    std::uint64_t t_ = 0;
    std::map<std::string, DenseTensor> m_;
    std::map<std::string, DenseTensor> v_;
};

}  // namespace omtl
