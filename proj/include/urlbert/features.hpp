// Frozen-encoder feature extraction and small classical classifiers.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "urlbert/finetune.hpp"
#include "urlbert/metrics.hpp"
#include "urlbert/nn/checkpoint.hpp"

namespace urlbert {

struct FeatureMatrix {
    std::size_t rows = 0, dim = 0;
    std::vector<double> values;
    std::vector<int> labels;
    nlohmann::json source = nlohmann::json::object();

    std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * dim, dim); }

    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> matrix() const {
        return {values.data(), Eigen::Index(rows), Eigen::Index(dim)};
    }
};

/// Pooled CLS features from a frozen encoder. Learned pooling kinds need
/// their head parameters under `prefix`.
template <class T>
FeatureMatrix extract_features(const ParamStore<T>& params, const EncoderConfig& enc, const LabeledTokens& data,
                               const HeadSpec& spec, const std::string& prefix = "", std::size_t batch_size = 64) {
    if (spec.kind == HeadKind::cnn) throw std::invalid_argument("extract_features: cnn head has no pooled feature");
    spec.validate(enc.layers);
    const auto before = params.checksum();
    nn::NoGradGuard ng;
    FeatureMatrix fm;
    fm.dim = spec.feature_dim(enc.hidden);
    fm.labels = data.labels;
    fm.source = {{"checkpoint", nn::hex64(before)}, {"pool", spec.name()}};
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.resize(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto sub = gather_labeled(data, idx, spec);
        const auto f = pool(params, prefix, encode(params, enc, sub.batch), spec);
        if (f.rank() != 2 || f.dim(1) != fm.dim)
            throw nn::ShapeError("extract_features: pooled width " + nn::shape_str(f.shape()) + " does not match " +
                                 std::to_string(fm.dim));
        for (T v : f.data()) {
            if (!std::isfinite(double(v))) throw std::runtime_error("extract_features: non-finite feature");
            fm.values.push_back(double(v));
        }
    }
    fm.rows = data.size();
    if (params.checksum() != before) throw std::logic_error("extract_features: parameters changed");
    return fm;
}

inline void save_features(const FeatureMatrix& fm, const std::filesystem::path& stem) {
    ParamStore<double> ps;
    ps.add("features", {fm.rows, fm.dim}, fm.values);
    std::vector<double> labels(fm.labels.begin(), fm.labels.end());
    ps.add("labels", {fm.rows}, labels);
    nn::save_checkpoint<float>(ps, stem, {{"kind", "features"}, {"source", fm.source}});
}

inline FeatureMatrix load_features(const std::filesystem::path& stem) {
    auto ck = nn::load_checkpoint<double>(stem);
    FeatureMatrix fm;
    const auto& x = ck.params.at("features");
    fm.rows = x.dim(0);
    fm.dim = x.dim(1);
    fm.values = x.values();
    for (double v : ck.params.at("labels").data()) fm.labels.push_back(int(v));
    fm.source = ck.metadata().value("source", nlohmann::json::object());
    return fm;
}

struct Predictions {
    std::size_t classes = 0;
    std::vector<int> labels;
    /// rows × classes, row-major.
    std::vector<double> probs;

    Metrics metrics(std::span<const int> truth) const {
        const bool both = std::set<int>(truth.begin(), truth.end()).size() > 1;
        return compute_metrics(labels, truth, classes, both ? std::span<const double>(probs) : std::span<const double>{});
    }
};

namespace detail {

inline std::size_t class_count(const FeatureMatrix& train, const FeatureMatrix& test) {
    int hi = -1;
    for (int l : train.labels) hi = std::max(hi, l);
    for (int l : test.labels) hi = std::max(hi, l);
    std::set<int> seen(train.labels.begin(), train.labels.end());
    if (seen.size() < 2) throw std::invalid_argument("classifier: training data needs at least 2 classes");
    if (*seen.begin() < 0) throw std::invalid_argument("classifier: negative label");
    return std::size_t(hi + 1);
}

inline void check_dims(const FeatureMatrix& train, const FeatureMatrix& test) {
    if (train.dim != test.dim) throw std::invalid_argument("classifier: train and test widths differ");
    if (train.rows == 0 || test.rows == 0) throw std::invalid_argument("classifier: empty feature matrix");
    if (train.labels.size() != train.rows) throw std::invalid_argument("classifier: train labels missing");
}

inline int argmax_row(std::span<const double> row) {
    return int(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace detail

/// Cosine k-nearest neighbours; vote ties go to the smallest class id.
inline Predictions classify_knn(const FeatureMatrix& train, const FeatureMatrix& test, std::size_t k = 5) {
    detail::check_dims(train, test);
    if (k == 0 || k > train.rows) throw std::invalid_argument("knn: k must be in [1, train size]");
    Predictions out;
    out.classes = detail::class_count(train, test);
    auto unit = [](const FeatureMatrix& f) {
        Eigen::MatrixXd m = f.matrix();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            const double n = m.row(i).norm();
            if (n > 0) m.row(i) /= n;
        }
        return m;
    };
    const Eigen::MatrixXd a = unit(train), b = unit(test);
    const Eigen::MatrixXd sim = b * a.transpose();
    std::vector<std::size_t> order(train.rows);
    for (std::size_t i = 0; i < test.rows; ++i) {
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(k), order.end(), [&](auto x, auto y) {
            const double sx = sim(Eigen::Index(i), Eigen::Index(x)), sy = sim(Eigen::Index(i), Eigen::Index(y));
            return sx != sy ? sx > sy : x < y;
        });
        std::vector<double> votes(out.classes, 0.0);
        for (std::size_t j = 0; j < k; ++j) votes[std::size_t(train.labels[order[j]])] += 1.0 / double(k);
        out.labels.push_back(detail::argmax_row(votes));
        out.probs.insert(out.probs.end(), votes.begin(), votes.end());
    }
    return out;
}

struct LogisticConfig {
    double lr = 0.5;
    std::size_t epochs = 300;
    double l2 = 1e-4;
};

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent from zero weights.
inline Predictions classify_lr(const FeatureMatrix& train, const FeatureMatrix& test, const LogisticConfig& cfg = {}) {
    detail::check_dims(train, test);
    const std::size_t c = detail::class_count(train, test);
    const Eigen::MatrixXd x = train.matrix();
    const Eigen::RowVectorXd mean = x.colwise().mean();
    Eigen::RowVectorXd sd = ((x.rowwise() - mean).array().square().colwise().mean()).sqrt();
    for (Eigen::Index j = 0; j < sd.size(); ++j)
        if (sd(j) < 1e-12) sd(j) = 1.0;
    auto standardize = [&](const Eigen::MatrixXd& m) -> Eigen::MatrixXd {
        return (m.rowwise() - mean).array().rowwise() / sd.array();
    };
    const Eigen::MatrixXd xs = standardize(x);
    const auto n = double(train.rows);
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(xs.rows(), Eigen::Index(c));
    for (std::size_t i = 0; i < train.rows; ++i) y(Eigen::Index(i), train.labels[i]) = 1.0;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(xs.cols(), Eigen::Index(c));
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(Eigen::Index(c));
    auto softmax_rows = [](Eigen::MatrixXd z) {
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            z.row(i).array() -= z.row(i).maxCoeff();
            z.row(i) = z.row(i).array().exp().matrix();
            z.row(i) /= z.row(i).sum();
        }
        return z;
    };
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const Eigen::MatrixXd p = softmax_rows((xs * w).rowwise() + b);
        const Eigen::MatrixXd g = (p - y) / n;
        w -= cfg.lr * (xs.transpose() * g + cfg.l2 * w);
        b -= cfg.lr * g.colwise().sum();
    }
    const Eigen::MatrixXd p = softmax_rows((standardize(test.matrix()) * w).rowwise() + b);
    Predictions out;
    out.classes = c;
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        for (Eigen::Index j = 0; j < p.cols(); ++j) out.probs.push_back(p(i, j));
        out.labels.push_back(detail::argmax_row(std::span<const double>(out.probs).subspan(std::size_t(i) * c, c)));
    }
    return out;
}

/// Gaussian naive Bayes with maximum-likelihood variances plus
/// `var_smoothing` × the largest feature variance.
inline Predictions classify_gnb(const FeatureMatrix& train, const FeatureMatrix& test, double var_smoothing = 1e-9) {
    detail::check_dims(train, test);
    const std::size_t c = detail::class_count(train, test), d = train.dim;
    std::vector<double> count(c, 0), mean(c * d, 0), var(c * d, 0);
    for (std::size_t i = 0; i < train.rows; ++i) {
        const auto y = std::size_t(train.labels[i]);
        count[y] += 1;
        for (std::size_t j = 0; j < d; ++j) mean[y * d + j] += train.row(i)[j];
    }
    for (std::size_t y = 0; y < c; ++y)
        for (std::size_t j = 0; j < d; ++j) mean[y * d + j] = count[y] ? mean[y * d + j] / count[y] : 0.0;
    for (std::size_t i = 0; i < train.rows; ++i) {
        const auto y = std::size_t(train.labels[i]);
        for (std::size_t j = 0; j < d; ++j) {
            const double r = train.row(i)[j] - mean[y * d + j];
            var[y * d + j] += r * r;
        }
    }
    double max_var = 0;
    {
        const Eigen::MatrixXd x = train.matrix();
        const Eigen::RowVectorXd m = x.colwise().mean();
        max_var = ((x.rowwise() - m).array().square().colwise().mean()).maxCoeff();
    }
    const double eps = var_smoothing * max_var;
    for (std::size_t y = 0; y < c; ++y)
        for (std::size_t j = 0; j < d; ++j) var[y * d + j] = (count[y] ? var[y * d + j] / count[y] : 0.0) + eps;
    Predictions out;
    out.classes = c;
    std::vector<double> logp(c);
    for (std::size_t i = 0; i < test.rows; ++i) {
        for (std::size_t y = 0; y < c; ++y) {
            if (count[y] == 0) {
                logp[y] = -std::numeric_limits<double>::infinity();
                continue;
            }
            double lp = std::log(count[y] / double(train.rows));
            for (std::size_t j = 0; j < d; ++j) {
                const double v = var[y * d + j];
                if (!(v > 0)) throw std::invalid_argument("gnb: zero variance; use var_smoothing > 0");
                const double r = test.row(i)[j] - mean[y * d + j];
                lp += -0.5 * std::log(2 * M_PI * v) - r * r / (2 * v);
            }
            logp[y] = lp;
        }
        const double mx = *std::max_element(logp.begin(), logp.end());
        double z = 0;
        for (double v : logp) z += std::exp(v - mx);
        for (double v : logp) out.probs.push_back(std::exp(v - mx) / z);
        out.labels.push_back(detail::argmax_row(std::span<const double>(out.probs).subspan(i * c, c)));
    }
    return out;
}

}  // namespace urlbert
