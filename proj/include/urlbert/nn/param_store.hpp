#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "urlbert/nn/tensor.hpp"

namespace urlbert::nn {

/// Named trainable tensors plus the optimizer step counter. Iteration order
/// is the lexicographic name order, which fixes every reduction order.
template <class T>
class ParamStore {
  public:
    Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> init) {
        if (params_.contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
        auto [it, _] = params_.emplace(name, Tensor<T>(std::move(shape), std::move(init), true));
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.contains(name); }
    void erase(const std::string& name) { params_.erase(name); }

    std::map<std::string, Tensor<T>>& items() { return params_; }
    const std::map<std::string, Tensor<T>>& items() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::size_t step_count = 0;

    void zero_grad() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

    /// Toggles gradient tracking for every parameter whose name starts with
    /// `prefix` (empty prefix = all).
    void set_trainable(std::string_view prefix, bool on) {
        for (auto& [name, p] : params_)
            if (name.starts_with(prefix)) p.set_requires_grad(on);
    }

    std::size_t num_elements() const {
        std::size_t n = 0;
        for (const auto& [_, p] : params_) n += p.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& [_, p] : params_)
            for (T v : p.data())
                if (!std::isfinite(v)) return false;
        return true;
    }

    /// FNV-1a over names, shapes and raw value bytes of the matching params.
    std::uint64_t checksum(std::string_view prefix = {}) const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](const void* data, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 1099511628211ull;
            }
        };
        for (const auto& [name, p] : params_) {
            if (!name.starts_with(prefix)) continue;
            mix(name.data(), name.size());
            for (auto d : p.shape()) mix(&d, sizeof d);
            mix(p.data().data(), p.size() * sizeof(T));
        }
        return h;
    }

    /// Deep copy (fresh leaves, no gradients).
    ParamStore clone() const {
        ParamStore out;
        for (const auto& [name, p] : params_) {
            out.add(name, p.shape(), p.values()).set_requires_grad(p.requires_grad());
        }
        out.step_count = step_count;
        return out;
    }

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [name, p] : params_) {
            out.add(name, p.shape(), std::vector<U>(p.data().begin(), p.data().end()));
        }
        out.step_count = step_count;
        return out;
    }

  private:
    std::map<std::string, Tensor<T>> params_;
};

/// Clears requires_grad on every parameter for the guard's lifetime.
template <class T>
class FreezeGuard {
  public:
    explicit FreezeGuard(ParamStore<T>& params) : params_(params) {
        for (auto& [name, p] : params_.items()) {
            saved_.emplace_back(name, p.requires_grad());
            p.set_requires_grad(false);
        }
    }
    ~FreezeGuard() {
        for (auto& [name, on] : saved_) params_.at(name).set_requires_grad(on);
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

  private:
    ParamStore<T>& params_;
    std::vector<std::pair<std::string, bool>> saved_;
};

/// Normal(0, std) truncated at two standard deviations.
template <class T>
std::vector<T> truncated_normal(std::size_t n, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> out(n);
    for (auto& v : out) {
        double z = dist(rng);
        while (std::abs(z) > 2.0) z = dist(rng);
        v = static_cast<T>(z * std);
    }
    return out;
}

}  // namespace urlbert::nn
