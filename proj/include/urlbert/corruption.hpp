// Stage-1 shuffle/replace corruption and masked-LM masking.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "urlbert/encoder.hpp"
#include "urlbert/tokenizer.hpp"

namespace urlbert {

namespace rstd_label {
inline constexpr int shuffled = 0;
inline constexpr int replaced = 1;
inline constexpr int original = 2;
inline constexpr int ignore = -1;
}  // namespace rstd_label

struct RstdBatch {
    std::vector<int> corrupted_ids;
    std::vector<int> labels;
};

struct MlmBatch {
    std::vector<int> masked_ids;
    std::vector<int> targets;
};

/// ⌈rate·n⌉, robust to products like 0.05·40 landing a hair above an integer.
inline std::size_t ceil_count(double rate, std::size_t n) {
    if (rate <= 0.0 || n == 0) return 0;
    return std::min(n, static_cast<std::size_t>(std::ceil(rate * double(n) - 1e-9)));
}

inline std::size_t shuffle_count(double rate, std::size_t n) {
    if (rate <= 0.0 || n < 2) return 0;
    return std::max<std::size_t>(2, ceil_count(rate, n));
}

inline std::size_t replace_count(double rate, std::size_t n, std::size_t shuffled) {
    return std::min(ceil_count(rate, n), n - shuffled);
}

namespace detail {

/// Uniform id in [special::count, vocab_size) other than `avoid`.
inline int random_other_id(std::mt19937_64& rng, std::size_t vocab_size, int avoid) {
    const int lo = special::count, hi = static_cast<int>(vocab_size) - 1;
    const bool skip = avoid >= lo && avoid <= hi;
    int id = std::uniform_int_distribution<int>(lo, skip ? hi - 1 : hi)(rng);
    if (skip && id >= avoid) ++id;
    return id;
}

/// Rearranges `vals` so that no slot keeps an equal value, if possible.
/// Returns false when the multiset admits no such arrangement.
inline bool value_derangement(std::vector<int>& vals, std::mt19937_64& rng) {
    const std::size_t k = vals.size();
    std::map<int, std::size_t> mult;
    for (int v : vals) ++mult[v];
    std::size_t top = 0;
    for (auto& [_, c] : mult) top = std::max(top, c);
    if (2 * top > k) return false;
    const auto orig = vals;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::shuffle(vals.begin(), vals.end(), rng);
        bool ok = true;
        for (std::size_t i = 0; i < k && ok; ++i) ok = vals[i] != orig[i];
        if (ok) return true;
    }
    std::vector<std::size_t> order(k);
    for (std::size_t i = 0; i < k; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return orig[a] < orig[b]; });
    for (std::size_t i = 0; i < k; ++i) vals[order[i]] = orig[order[(i + top) % k]];
    return true;
}

/// Random permutation of 0..k-1 with no fixed point (k >= 2).
inline std::vector<std::size_t> position_derangement(std::size_t k, std::mt19937_64& rng) {
    std::vector<std::size_t> perm(k);
    for (;;) {
        for (std::size_t i = 0; i < k; ++i) perm[i] = i;
        std::shuffle(perm.begin(), perm.end(), rng);
        bool ok = true;
        for (std::size_t i = 0; i < k && ok; ++i) ok = perm[i] != i;
        if (ok) return perm;
    }
}

}  // namespace detail

/// Per sequence, over real tokens after CLS: shuffles ⌈shuffle_rate·n⌉
/// positions (at least 2) among themselves and replaces ⌈replace_rate·n⌉
/// other positions with random non-special ids.
inline RstdBatch corrupt_rstd(const Batch& batch, double shuffle_rate, double replace_rate,
                              std::size_t vocab_size, std::uint64_t seed) {
    if (shuffle_rate < 0 || replace_rate < 0 || shuffle_rate + replace_rate >= 1.0)
        throw std::invalid_argument("corrupt_rstd: rates must be >= 0 with sum < 1");
    if (vocab_size < special::count + 8)
        throw std::invalid_argument("corrupt_rstd: vocabulary needs at least 8 non-special tokens");
    std::mt19937_64 rng(seed);
    RstdBatch out{batch.ids, std::vector<int>(batch.ids.size(), rstd_label::ignore)};
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const std::size_t base = r * batch.len;
        const std::size_t real = std::min(batch.true_len[r], batch.len);
        std::vector<std::size_t> pos;
        for (std::size_t p = 1; p < real; ++p) {
            pos.push_back(base + p);
            out.labels[base + p] = rstd_label::original;
        }
        const std::size_t n = pos.size();
        const std::size_t ks = shuffle_count(shuffle_rate, n);
        const std::size_t kr = replace_count(replace_rate, n, ks);
        std::shuffle(pos.begin(), pos.end(), rng);
        std::vector<std::size_t> sel(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(ks));
        std::sort(sel.begin(), sel.end());
        if (ks >= 2) {
            std::vector<int> vals;
            for (auto p : sel) vals.push_back(batch.ids[p]);
            if (!detail::value_derangement(vals, rng)) {
                const auto perm = detail::position_derangement(ks, rng);
                std::vector<int> moved(ks);
                for (std::size_t i = 0; i < ks; ++i) moved[i] = vals[perm[i]];
                vals = std::move(moved);
            }
            for (std::size_t i = 0; i < ks; ++i) {
                out.corrupted_ids[sel[i]] = vals[i];
                out.labels[sel[i]] = rstd_label::shuffled;
            }
        }
        for (std::size_t i = ks; i < ks + kr; ++i) {
            out.corrupted_ids[pos[i]] = detail::random_other_id(rng, vocab_size, batch.ids[pos[i]]);
            out.labels[pos[i]] = rstd_label::replaced;
        }
    }
    return out;
}

/// Selects ⌈mask_rate·n⌉ real tokens after CLS per sequence; each becomes
/// [MASK] (80%), a random non-special id (10%) or stays (10%).
inline MlmBatch mask_mlm(const Batch& batch, double mask_rate, std::size_t vocab_size, std::uint64_t seed) {
    if (!(mask_rate >= 0.0 && mask_rate < 1.0)) throw std::invalid_argument("mask_mlm: rate must be in [0, 1)");
    if (vocab_size <= special::count) throw std::invalid_argument("mask_mlm: vocabulary has no regular tokens");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    MlmBatch out{batch.ids, std::vector<int>(batch.ids.size(), -1)};
    for (std::size_t r = 0; r < batch.rows; ++r) {
        const std::size_t base = r * batch.len;
        const std::size_t real = std::min(batch.true_len[r], batch.len);
        std::vector<std::size_t> pos;
        for (std::size_t p = 1; p < real; ++p) pos.push_back(base + p);
        std::shuffle(pos.begin(), pos.end(), rng);
        const std::size_t k = ceil_count(mask_rate, pos.size());
        for (std::size_t i = 0; i < k; ++i) {
            const auto p = pos[i];
            out.targets[p] = batch.ids[p];
            const double u = unit(rng);
            if (u < 0.8) {
                out.masked_ids[p] = special::mask;
            } else if (u < 0.9) {
                out.masked_ids[p] = std::uniform_int_distribution<int>(
                    special::count, static_cast<int>(vocab_size) - 1)(rng);
            }
        }
    }
    return out;
}

/// Human-readable per-token dump of one batch's corruption and masking.
inline std::string corruption_audit(const Vocab& vocab, const Batch& batch, const RstdBatch& rstd,
                                    const MlmBatch& mlm) {
    static const char* names[] = {"SHU", "REP", "ORI"};
    std::ostringstream os;
    for (std::size_t r = 0; r < batch.rows; ++r) {
        os << "# sequence " << r << " (true_len " << batch.true_len[r] << ")\n";
        for (std::size_t p = 0; p < std::min(batch.true_len[r], batch.len); ++p) {
            const auto i = r * batch.len + p;
            os << p << '\t' << vocab.token(batch.ids[i]) << '\t' << vocab.token(rstd.corrupted_ids[i]) << '\t'
               << (rstd.labels[i] < 0 ? "-" : names[rstd.labels[i]]) << '\t'
               << vocab.token(mlm.masked_ids[i]) << '\t' << (mlm.targets[i] < 0 ? "-" : "TGT") << '\n';
        }
    }
    return os.str();
}

}  // namespace urlbert
