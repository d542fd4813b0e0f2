#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "urlbert/nn/param_store.hpp"

namespace urlbert::nn {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class NonFiniteGradient : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Adam with decoupled weight decay:
///   p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)
/// Parameters with requires_grad == false are left alone (frozen). A
/// trainable parameter without an accumulated gradient is treated as having
/// a zero gradient.
template <class T>
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }

    void step(ParamStore<T>& params) { step(params, cfg_.lr); }

    void step(ParamStore<T>& params, double lr) {
        for (const auto& [name, p] : params.items()) {
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (T g : p.grad()) {
                if (!std::isfinite(g)) throw NonFiniteGradient("adamw: non-finite gradient in " + name);
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (auto& [name, p] : params.items()) {
            if (!p.requires_grad()) continue;
            auto& st = state_[name];
            if (st.m.size() != p.size()) {
                st.m.assign(p.size(), 0.0);
                st.v.assign(p.size(), 0.0);
            }
            auto w = p.mutable_data();
            const bool has = p.has_grad();
            const auto g = p.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = has ? double(g[i]) : 0.0;
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gi;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                double wi = double(w[i]);
                wi -= lr * cfg_.weight_decay * wi;
                wi -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                w[i] = static_cast<T>(wi);
            }
        }
        ++params.step_count;
    }

    struct Moments {
        std::vector<double> m, v;
    };
    const std::map<std::string, Moments>& state() const { return state_; }

  private:
    AdamWConfig cfg_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

}  // namespace urlbert::nn
