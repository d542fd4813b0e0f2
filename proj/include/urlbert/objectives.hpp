// Training objectives. Each returns the differentiable scalar plus the number
// of rows that contributed.
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "urlbert/nn/ops.hpp"

namespace urlbert {

using nn::Tensor;

template <class T>
struct LossValue {
    Tensor<T> value;
    std::size_t n_contributing = 0;
    double scalar() const { return double(value.item()); }
};

namespace detail {
template <class T>
LossValue<T> masked_ce(const char* what, const Tensor<T>& logits, std::span<const int> targets) {
    std::size_t n = 0;
    for (int t : targets) n += t != -1;
    if (n == 0) throw std::invalid_argument(std::string(what) + ": no supervised positions");
    return {nn::cross_entropy(logits, targets, -1), n};
}
}  // namespace detail

/// Three-way token cross-entropy averaged over supervised tokens.
template <class T>
LossValue<T> loss_rstd(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.shape().back() != 3) nn::shape_fail("loss_rstd", logits.shape(), "needs 3 classes");
    for (int l : labels)
        if (l < -1 || l > 2) throw std::invalid_argument("loss_rstd: label outside {-1, 0, 1, 2}");
    return detail::masked_ce("loss_rstd", logits, labels);
}

/// Cross-entropy over positions whose target is not -1.
template <class T>
LossValue<T> loss_mlm(const Tensor<T>& logits, std::span<const int> targets) {
    return detail::masked_ce("loss_mlm", logits, targets);
}

/// Contrastive loss over 2N rows where rows 2k and 2k+1 are a positive pair.
template <class T>
LossValue<T> nt_xent(const Tensor<T>& reps, double tau) {
    if (!(tau > 0)) throw std::invalid_argument("nt_xent: temperature must be positive");
    if (reps.rank() != 2 || reps.dim(0) < 2 || reps.dim(0) % 2 != 0)
        nn::shape_fail("nt_xent", reps.shape(), "needs (2N, d) with N >= 1");
    const std::size_t m = reps.dim(0);
    const auto z = nn::l2_normalize(reps);
    auto sim = nn::scale(nn::matmul_nt(z, z), T(1.0 / tau));
    std::vector<T> diag(m * m, T(0));
    for (std::size_t i = 0; i < m; ++i) diag[i * m + i] = -std::numeric_limits<T>::infinity();
    sim = nn::add(sim, nn::constant<T>({m, m}, std::move(diag)));
    std::vector<int> partner(m);
    for (std::size_t i = 0; i < m; ++i) partner[i] = static_cast<int>(i ^ 1);
    return {nn::cross_entropy(sim, std::span<const int>(partner)), m};
}

/// Row-mean KL(p ‖ q) for distributions over the last axis.
template <class T>
LossValue<T> kl_div(const Tensor<T>& p, const Tensor<T>& q) {
    for (T v : p.data())
        if (v < T(0)) throw std::invalid_argument("kl_div: negative probability in p");
    for (T v : q.data())
        if (v < T(0)) throw std::invalid_argument("kl_div: negative probability in q");
    auto p2 = p.rank() == 2 ? p : nn::reshape(p, {p.size() / p.shape().back(), p.shape().back()});
    auto q2 = q.rank() == 2 ? q : nn::reshape(q, {q.size() / q.shape().back(), q.shape().back()});
    return {nn::kl_rows(p2, q2), p2.dim(0)};
}

inline constexpr double vat_weight = 10.0;

/// con + mlm + 10·vat.
template <class T>
LossValue<T> stage2_loss(const LossValue<T>& con, const LossValue<T>& mlm, const LossValue<T>& vat,
                         double vat_w = vat_weight) {
    return {nn::add(nn::add(con.value, mlm.value), nn::scale(vat.value, T(vat_w))),
            con.n_contributing + mlm.n_contributing + vat.n_contributing};
}

/// Mean −log softmax(logits)[label].
template <class T>
LossValue<T> loss_cls(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size())
        nn::shape_fail("loss_cls", logits.shape(), nn::Shape{labels.size()});
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= logits.dim(1))
            throw std::out_of_range("loss_cls: label " + std::to_string(l) + " out of range");
    return {nn::cross_entropy(logits, labels, -1), labels.size()};
}

}  // namespace urlbert
