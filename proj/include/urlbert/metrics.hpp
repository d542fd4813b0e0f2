// Classification metrics: accuracy, precision/recall/F1 (binary or micro),
// rank-statistic ROC-AUC and ROC curves.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace urlbert {

struct ClassStats {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
};

struct Metrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    std::optional<double> auc;
    std::string averaging = "binary";
    std::vector<ClassStats> per_class;

    nlohmann::json to_json() const {
        nlohmann::json j{{"accuracy", accuracy}, {"precision", precision}, {"recall", recall}, {"f1", f1},
                         {"auc", auc ? nlohmann::json(*auc) : nlohmann::json(nullptr)},
                         {"averaging", averaging},
                         {"precision_undefined_convention", 0}};
        auto& pc = j["per_class"] = nlohmann::json::array();
        for (const auto& c : per_class)
            pc.push_back({{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"support", c.support}});
        return j;
    }
};

inline double safe_div(double a, double b) { return b == 0 ? 0.0 : a / b; }

inline double f1_of(double p, double r) { return safe_div(2 * p * r, p + r); }

/// P(score of a random positive > score of a random negative), ties ½,
/// via midranks.
inline double roc_auc(std::span<const double> scores, std::span<const int> positive) {
    if (scores.size() != positive.size()) throw std::invalid_argument("roc_auc: size mismatch");
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
    double rank_sum = 0;
    std::size_t npos = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = (double(i + 1) + double(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k)
            if (positive[order[k]]) rank_sum += mid;
        i = j;
    }
    for (int p : positive) npos += p != 0;
    const std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) throw std::invalid_argument("roc_auc: needs both classes");
    return (rank_sum - double(npos) * double(npos + 1) / 2.0) / (double(npos) * double(nneg));
}

struct RocPoint {
    double fpr, tpr, threshold;
};

/// Curve points for thresholds at each distinct score, descending, starting
/// at (0, 0, +inf).
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> positive) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    double npos = 0, nneg = 0;
    for (int p : positive) (p ? npos : nneg) += 1;
    if (npos == 0 || nneg == 0) throw std::invalid_argument("roc_curve: needs both classes");
    std::vector<RocPoint> out{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            (positive[order[j]] ? tp : fp) += 1;
            ++j;
        }
        out.push_back({fp / nneg, tp / npos, scores[order[i]]});
        i = j;
    }
    return out;
}

/// TPR at a fixed FPR by linear interpolation between curve points.
inline double tpr_at_fpr(const std::vector<RocPoint>& curve, double fpr) {
    for (std::size_t i = 1; i < curve.size(); ++i) {
        if (curve[i].fpr >= fpr) {
            const auto& a = curve[i - 1];
            const auto& b = curve[i];
            if (b.fpr == a.fpr) return b.tpr;
            return a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr);
        }
    }
    return curve.back().tpr;
}

inline void write_roc_csv(const std::string& path, const std::vector<RocPoint>& curve) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "fpr,tpr,threshold\n";
    for (const auto& p : curve) out << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
}

/// Metrics from hard predictions. With two classes P/R/F1 refer to class 1;
/// otherwise they are micro-averaged. `probs` (n × classes, row-major), when
/// given, yields the AUC: class-1 scores for binary tasks, one-vs-rest
/// flattened scores for multiclass.
inline Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels,
                               std::size_t num_classes, std::span<const double> probs = {}) {
    if (predictions.size() != labels.size() || labels.empty())
        throw std::invalid_argument("compute_metrics: predictions and labels must be non-empty and equal length");
    if (num_classes < 2) throw std::invalid_argument("compute_metrics: needs at least 2 classes");
    Metrics m;
    m.per_class.resize(num_classes);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]), p = static_cast<std::size_t>(predictions[i]);
        if (y >= num_classes || p >= num_classes) throw std::out_of_range("compute_metrics: class id out of range");
        ++m.per_class[y].support;
        if (y == p) {
            ++correct;
            ++m.per_class[y].tp;
        } else {
            ++m.per_class[p].fp;
            ++m.per_class[y].fn;
        }
    }
    m.accuracy = double(correct) / double(labels.size());
    if (num_classes == 2) {
        const auto& c = m.per_class[1];
        m.precision = safe_div(double(c.tp), double(c.tp + c.fp));
        m.recall = safe_div(double(c.tp), double(c.tp + c.fn));
    } else {
        m.averaging = "micro";
        double tp = 0, fp = 0, fn = 0;
        for (const auto& c : m.per_class) {
            tp += double(c.tp);
            fp += double(c.fp);
            fn += double(c.fn);
        }
        m.precision = safe_div(tp, tp + fp);
        m.recall = safe_div(tp, tp + fn);
    }
    m.f1 = f1_of(m.precision, m.recall);
    if (!probs.empty()) {
        if (probs.size() != labels.size() * num_classes)
            throw std::invalid_argument("compute_metrics: score matrix does not match labels");
        std::vector<double> s;
        std::vector<int> pos;
        if (num_classes == 2) {
            for (std::size_t i = 0; i < labels.size(); ++i) {
                s.push_back(probs[i * 2 + 1]);
                pos.push_back(labels[i] == 1);
            }
        } else {
            for (std::size_t i = 0; i < labels.size(); ++i) {
                for (std::size_t c = 0; c < num_classes; ++c) {
                    s.push_back(probs[i * num_classes + c]);
                    pos.push_back(static_cast<std::size_t>(labels[i]) == c);
                }
            }
        }
        m.auc = roc_auc(s, pos);
    }
    return m;
}

}  // namespace urlbert
