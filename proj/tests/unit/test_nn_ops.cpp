#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "urlbert/nn/grad_check.hpp"
#include "urlbert/nn/ops.hpp"

using namespace urlbert::nn;
using Catch::Approx;
using D = Tensor<double>;

namespace {

D rnd(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = u(rng);
    return D(std::move(shape), std::move(v));
}

// Random projection to a scalar so every output element matters.
D project(const D& y, std::uint64_t seed = 77) { return sum_all(mul(y, rnd(y.shape(), seed))); }

void check_grads(const std::function<D()>& f, std::vector<std::pair<std::string, D>> inputs,
                 GradCheckOptions opt = {}) {
    const auto report = grad_check(f, std::move(inputs), opt);
    for (const auto& e : report.failures) {
        UNSCOPED_INFO(e.name << "[" << e.index << "] analytic " << e.analytic << " numeric " << e.numeric);
    }
    CHECK(report.checked > 0);
    CHECK(report.ok());
}

}  // namespace

TEST_CASE("forward values", "[ops]") {
    const D x({3}, {1, 2, 3});
    CHECK(gelu(D({1}, {1.0})).item() == Approx(0.8413447460685429).epsilon(1e-12));

    const auto p = softmax(x);
    CHECK(p.data()[0] == Approx(0.09003057317038046));
    CHECK(p.data()[1] == Approx(0.24472847105479764));
    CHECK(p.data()[2] == Approx(0.6652409557748219));

    const auto ln = layer_norm(x, D({3}, {1, 1, 1}), D({3}, {0, 0, 0}));
    CHECK(ln.data()[0] == Approx(-1.224744871391589));
    CHECK(ln.data()[1] == Approx(0.0).margin(1e-12));
    CHECK(ln.data()[2] == Approx(1.224744871391589));

    const std::vector<int> tgt{2};
    CHECK(cross_entropy(D({1, 3}, {1, 2, 3}), tgt).item() == Approx(0.40760596444438046));

    const auto kl = kl_rows(D({1, 2}, {0.9, 0.1}), D({1, 2}, {0.5, 0.5}));
    CHECK(kl.item() == Approx(0.3680642071684971));
    CHECK(kl_rows(D({1, 2}, {0.0, 1.0}), D({1, 2}, {0.5, 0.5})).item() == Approx(std::log(2.0)));

    const auto m = matmul(D({2, 2}, {1, 2, 3, 4}), D({2, 2}, {5, 6, 7, 8}));
    CHECK(m.values() == std::vector<double>{19, 22, 43, 50});
    const auto mt = matmul_nt(D({2, 2}, {1, 2, 3, 4}), D({2, 2}, {5, 6, 7, 8}));
    CHECK(mt.values() == std::vector<double>{17, 23, 39, 53});
}

TEST_CASE("shape errors name the op", "[ops]") {
    CHECK_THROWS_AS(matmul(D::zeros({2, 3}), D::zeros({2, 3})), ShapeError);
    CHECK_THROWS_WITH(matmul(D::zeros({2, 3}), D::zeros({2, 3})), Catch::Matchers::ContainsSubstring("matmul"));
    CHECK_THROWS_AS(add(D::zeros({2, 3}), D::zeros({2})), ShapeError);
    CHECK_THROWS_AS(reshape(D::zeros({2, 3}), {4}), ShapeError);
    const std::vector<int> none{-1, -1};
    CHECK_THROWS(cross_entropy(D::zeros({2, 3}), none));
    const std::vector<int> bad{3};
    CHECK_THROWS_AS(cross_entropy(D::zeros({1, 3}), bad), std::out_of_range);
    CHECK_THROWS(l2_normalize(D::zeros({1, 3})));
}

TEST_CASE("dropout", "[ops]") {
    const auto x = rnd({4, 50}, 1);
    CHECK(dropout(x, 0.0, 3).values() == x.values());
    const auto a = dropout(x, 0.5, 3), b = dropout(x, 0.5, 3), c = dropout(x, 0.5, 4);
    CHECK(a.values() == b.values());
    CHECK(a.values() != c.values());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = a.data()[i];
        CHECK((v == 0.0 || v == Approx(2.0 * x.data()[i])));
    }
}

TEST_CASE("attention matches a naive single-head loop and ignores masked keys", "[ops]") {
    const std::size_t B = 2, L = 4, H = 3;
    const auto q = rnd({B, L, H}, 1), k = rnd({B, L, H}, 2), v = rnd({B, L, H}, 3);
    const std::vector<double> mask{1, 1, 1, 0, 1, 1, 0, 0};
    const auto out = attention(q, k, v, std::span<const double>(mask), 1);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> w(L, 0.0);
            double mx = -1e300, z = 0;
            for (std::size_t j = 0; j < L; ++j) {
                if (mask[b * L + j] == 0) continue;
                double s = 0;
                for (std::size_t h = 0; h < H; ++h) s += q.data()[(b * L + i) * H + h] * k.data()[(b * L + j) * H + h];
                w[j] = s / std::sqrt(double(H));
                mx = std::max(mx, w[j]);
            }
            for (std::size_t j = 0; j < L; ++j) {
                w[j] = mask[b * L + j] == 0 ? 0.0 : std::exp(w[j] - mx);
                z += w[j];
            }
            for (std::size_t h = 0; h < H; ++h) {
                double acc = 0;
                for (std::size_t j = 0; j < L; ++j) acc += w[j] / z * v.data()[(b * L + j) * H + h];
                CHECK(out.data()[(b * L + i) * H + h] == Approx(acc).epsilon(1e-12));
            }
        }
    }
    // perturbing a masked key or value leaves the output unchanged
    auto k2 = k.detach(), v2 = v.detach();
    k2.mutable_data()[3 * H] += 5.0;
    v2.mutable_data()[3 * H + 1] -= 5.0;
    CHECK(attention(q, k2, v2, std::span<const double>(mask), 1).values() == out.values());
}

TEST_CASE("gradients of elementwise and matrix ops", "[ops][gradcheck]") {
    auto a = rnd({3, 4}, 1), b = rnd({4, 5}, 2), c = rnd({3, 4}, 3), r = rnd({4}, 4);
    check_grads([&] { return project(matmul(a, b)); }, {{"a", a}, {"b", b}});
    auto bt = rnd({5, 4}, 5);
    check_grads([&] { return project(matmul_nt(a, bt)); }, {{"a", a}, {"b", bt}});
    auto a3 = rnd({2, 3, 4}, 6);
    check_grads([&] { return project(matmul(a3, b)); }, {{"a", a3}, {"b", b}});
    check_grads([&] { return project(add(a, c)); }, {{"a", a}, {"c", c}});
    check_grads([&] { return project(add(a, r)); }, {{"a", a}, {"r", r}});
    check_grads([&] { return project(sub(a, r)); }, {{"a", a}, {"r", r}});
    check_grads([&] { return project(mul(a, c)); }, {{"a", a}, {"c", c}});
    check_grads([&] { return project(mul(a3, r)); }, {{"a", a3}, {"r", r}});
    check_grads([&] { return project(scale(a, 2.5)); }, {{"a", a}});
    check_grads([&] { return project(gelu(a)); }, {{"a", a}});
    check_grads([&] { return project(tanh(a)); }, {{"a", a}});
    check_grads([&] { return project(reshape(a, {2, 6})); }, {{"a", a}});
}

TEST_CASE("gradients of normalization and softmax ops", "[ops][gradcheck]") {
    auto x = rnd({3, 5}, 1), g = rnd({5}, 2, 0.5, 1.5), b = rnd({5}, 3);
    check_grads([&] { return project(layer_norm(x, g, b)); }, {{"x", x}, {"g", g}, {"b", b}});
    check_grads([&] { return project(softmax(x)); }, {{"x", x}});
    check_grads([&] { return project(l2_normalize(x)); }, {{"x", x}});
    auto d = rnd({6, 5}, 4);
    check_grads([&] { return project(dropout(d, 0.3, 11)); }, {{"x", d}});
}

TEST_CASE("gradients of losses", "[ops][gradcheck]") {
    auto logits = rnd({4, 3}, 1, -2, 2);
    const std::vector<int> tgt{0, 2, -1, 1};
    check_grads([&] { return cross_entropy(logits, tgt); }, {{"logits", logits}});
    auto pl = rnd({3, 4}, 2), ql = rnd({3, 4}, 3);
    check_grads([&] { return kl_rows(softmax(pl), softmax(ql)); }, {{"p", pl}, {"q", ql}});
}

TEST_CASE("gradients of shape combinators", "[ops][gradcheck]") {
    auto a = rnd({2, 3, 2}, 1), b = rnd({2, 3, 4}, 2), c = rnd({2, 3, 2}, 3);
    check_grads([&] { return project(concat<double>({a, b})); }, {{"a", a}, {"b", b}});
    for (std::size_t axis = 0; axis <= 3; ++axis) {
        check_grads([&] { return project(stack<double>({a, c}, axis)); }, {{"a", a}, {"c", c}});
    }
    for (std::size_t axis = 0; axis < 3; ++axis) {
        for (auto kind : {Reduce::sum, Reduce::mean, Reduce::max, Reduce::min}) {
            check_grads([&] { return project(reduce(b, axis, kind)); }, {{"b", b}});
        }
    }
    check_grads([&] { return sum_all(b); }, {{"b", b}});
    check_grads([&] { return mean_all(b); }, {{"b", b}});
    check_grads([&] { return project(select(b, 1, 2)); }, {{"b", b}});
    const std::vector<std::size_t> rows{5, 0, 0, 3};
    check_grads([&] { return project(gather_rows(b, rows)); }, {{"b", b}});
}

TEST_CASE("gradients of embedding and pooling helpers", "[ops][gradcheck]") {
    auto table = rnd({7, 3}, 1);
    const std::vector<int> ids{1, 4, 4, 0, 6, 1};
    check_grads([&] { return project(embedding(table, ids, {2, 3})); }, {{"table", table}});

    auto x = rnd({2, 4, 3}, 2), w2 = rnd({2, 4}, 3), w1 = rnd({4}, 4);
    check_grads([&] { return project(weighted_sum(x, w2)); }, {{"x", x}, {"w", w2}});
    check_grads([&] { return project(weighted_sum(x, w1)); }, {{"x", x}, {"w", w1}});
    const std::vector<double> f{1, 1, 0, 0, 1, 0.5, 1, 0};
    check_grads([&] { return project(scale_positions(x, std::span<const double>(f))); }, {{"x", x}});
    check_grads([&] { return project(unfold_same(x, 3)); }, {{"x", x}});
    const std::vector<double> m{1, 1, 1, 0, 1, 0, 0, 0};
    check_grads([&] { return project(masked_max_time(x, std::span<const double>(m))); }, {{"x", x}});
    const std::vector<double> none(8, 0.0);
    CHECK_THROWS(masked_max_time(x, std::span<const double>(none)));
}

TEST_CASE("gradient of multi-head attention", "[ops][gradcheck]") {
    auto q = rnd({2, 5, 4}, 1), k = rnd({2, 5, 4}, 2), v = rnd({2, 5, 4}, 3);
    const std::vector<double> mask{1, 1, 1, 1, 0, 1, 1, 0, 0, 0};
    check_grads([&] { return project(attention(q, k, v, std::span<const double>(mask), 2)); },
                {{"q", q}, {"k", k}, {"v", v}});
}

TEST_CASE("backward semantics", "[ops][tensor]") {
    auto w = D({2}, {1.0, 2.0}, true);
    auto y = sum_all(mul(w, w));
    y.backward();
    CHECK(w.grad()[0] == Approx(2.0));
    y.backward();
    CHECK(w.grad()[0] == Approx(4.0));  // leaf gradients accumulate
    w.zero_grad();
    CHECK_FALSE(w.has_grad());
    {
        NoGradGuard ng;
        auto z = sum_all(mul(w, w));
        CHECK_FALSE(z.requires_grad());
    }
    auto d = w.detach();
    CHECK_FALSE(d.requires_grad());
    CHECK(sum_all(mul(d, d)).requires_grad() == false);
}
