// Embedding-space augmentation: dropout views, FGSM and virtual adversarial
// perturbation.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "urlbert/nn/ops.hpp"
#include "urlbert/nn/param_store.hpp"
#include "urlbert/objectives.hpp"

namespace urlbert {

/// Inverted dropout: each element kept with probability 1 − p, scaled 1/(1 − p).
template <class T>
Tensor<T> dropout_augment(const Tensor<T>& emb, double p, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout_augment: p must be in [0, 1)");
    return nn::dropout(emb, p, seed);
}

/// emb + α·sign(grad), sign(0) = 0.
template <class T>
Tensor<T> fgsm_step(const Tensor<T>& emb, std::span<const T> grad, double alpha) {
    if (grad.size() != emb.size()) nn::shape_fail("fgsm_step", emb.shape(), nn::Shape{grad.size()});
    std::vector<T> step(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i)
        step[i] = grad[i] > T(0) ? T(alpha) : grad[i] < T(0) ? T(-alpha) : T(0);
    return nn::add(emb, nn::constant<T>(emb.shape(), std::move(step)));
}

struct VatConfig {
    double sigma2 = 1.0;
    double step = 1e4;
    double epsilon = 1.0;
};

/// Rescales each leading-axis slice of `delta` whose l2 norm exceeds eps.
template <class T>
void project_per_sequence(std::vector<T>& delta, std::size_t rows, double eps) {
    const std::size_t per = delta.size() / rows;
    for (std::size_t r = 0; r < rows; ++r) {
        double sq = 0;
        for (std::size_t i = 0; i < per; ++i) sq += double(delta[r * per + i]) * double(delta[r * per + i]);
        const double norm = std::sqrt(sq);
        if (norm > eps) {
            const T s = T(eps / norm);
            for (std::size_t i = 0; i < per; ++i) delta[r * per + i] *= s;
        }
    }
}

template <class T>
struct VatResult {
    LossValue<T> loss;
    std::vector<T> delta;
    double initial_kl = 0;
};

/// Model output distribution at embedding offset δ, e.g. softmax of the MLM
/// logits at supervised positions for emb + δ. With `frozen` set the
/// embedding input may be detached; only the gradient w.r.t. δ is used.
template <class T>
using PerturbedForward = std::function<Tensor<T>(const Tensor<T>& delta, bool frozen)>;

/// One-step virtual adversarial perturbation. δ0 ~ N(0, σ²) on positions
/// with position_mask != 0 (shape (rows, len)), one ascent step on
/// KL(f(x+δ) ‖ target) w.r.t. δ with parameters frozen, per-sequence
/// projection to ‖δ‖ ≤ ε, then the differentiable KL at the refined δ.
template <class T>
VatResult<T> vat_perturb(const PerturbedForward<T>& forward, const Tensor<T>& target, nn::Shape emb_shape,
                         std::span<const T> position_mask, nn::ParamStore<T>& params, const VatConfig& cfg,
                         std::uint64_t seed) {
    if (!(cfg.sigma2 > 0 && cfg.step > 0 && cfg.epsilon > 0))
        throw std::invalid_argument("vat_perturb: sigma2, step and epsilon must be positive");
    if (emb_shape.size() != 3 || position_mask.size() != emb_shape[0] * emb_shape[1])
        nn::shape_fail("vat_perturb", emb_shape, "needs (rows, len, hidden) with a (rows, len) mask");
    const std::size_t rows = emb_shape[0], hid = emb_shape[2];
    const auto y2 = target.detach();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, std::sqrt(cfg.sigma2));
    std::vector<T> delta(nn::numel(emb_shape));
    for (std::size_t i = 0; i < delta.size(); ++i) {
        const T v = T(noise(rng));
        delta[i] = position_mask[i / hid] != T(0) ? v : T(0);
    }
    VatResult<T> out;
    {
        nn::FreezeGuard<T> freeze(params);
        Tensor<T> d(emb_shape, delta, true);
        auto adv = kl_div(forward(d, true), y2);
        out.initial_kl = adv.scalar();
        if (!std::isfinite(out.initial_kl)) throw std::runtime_error("vat_perturb: non-finite KL");
        adv.value.backward();
        if (d.has_grad()) {
            const auto g = d.grad();
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += T(cfg.step) * g[i];
        }
    }
    project_per_sequence(delta, rows, cfg.epsilon);
    out.loss = kl_div(forward(nn::constant<T>(emb_shape, delta), false), y2);
    if (!std::isfinite(out.loss.scalar())) throw std::runtime_error("vat_perturb: non-finite KL");
    out.delta = std::move(delta);
    return out;
}

}  // namespace urlbert
