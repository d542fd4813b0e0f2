// Two-stage pre-training: stage 1 shuffle/replace token detection, stage 2
// masked LM + contrastive views + virtual adversarial training.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "urlbert/adversarial.hpp"
#include "urlbert/corruption.hpp"
#include "urlbert/encoder.hpp"
#include "urlbert/metrics.hpp"
#include "urlbert/nn/checkpoint.hpp"
#include "urlbert/nn/optim.hpp"
#include "urlbert/objectives.hpp"
#include "urlbert/seed.hpp"

namespace urlbert {

struct PretrainConfig {
    std::size_t stage1_epochs = 3;
    std::size_t stage2_epochs = 1;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    double warmup_fraction = 0.05;
    double weight_decay = 0.01;
    std::uint64_t seed = 1;
    /// Caps optimizer steps per stage (0 = no cap).
    std::size_t stage1_max_steps = 0;
    std::size_t stage2_max_steps = 0;
    double shuffle_rate = 0.05;
    double replace_rate = 0.05;
    double mask_rate = 0.15;
    double scl_dropout = 0.1;
    double fgsm_alpha = 0.01;
    double tau = 0.05;
    VatConfig vat;
    double vat_weight = 10.0;

    void validate() const {
        if (stage1_epochs < 1 || stage2_epochs < 1) throw std::invalid_argument("pretrain: epochs must be >= 1");
        if (batch_size < 2) throw std::invalid_argument("pretrain: batch_size must be >= 2");
        if (!(lr >= 0)) throw std::invalid_argument("pretrain: lr must be >= 0");
        if (!(warmup_fraction >= 0 && warmup_fraction < 1))
            throw std::invalid_argument("pretrain: warmup_fraction must be in [0, 1)");
        if (!(tau > 0)) throw std::invalid_argument("pretrain: tau must be positive");
    }
};

inline void to_json(nlohmann::json& j, const PretrainConfig& c) {
    j = {{"stage1_epochs", c.stage1_epochs}, {"stage2_epochs", c.stage2_epochs},
         {"batch_size", c.batch_size},       {"lr", c.lr},
         {"warmup_fraction", c.warmup_fraction}, {"weight_decay", c.weight_decay},
         {"seed", c.seed},                   {"stage1_max_steps", c.stage1_max_steps},
         {"stage2_max_steps", c.stage2_max_steps}, {"shuffle_rate", c.shuffle_rate},
         {"replace_rate", c.replace_rate},   {"mask_rate", c.mask_rate},
         {"scl_dropout", c.scl_dropout},     {"fgsm_alpha", c.fgsm_alpha},
         {"tau", c.tau},                     {"vat_sigma2", c.vat.sigma2},
         {"vat_step", c.vat.step},           {"vat_epsilon", c.vat.epsilon},
         {"vat_weight", c.vat_weight}};
}

struct TrainRecord {
    std::string stage;
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0;
    std::map<std::string, double> losses;
    double wall_ms = 0;
};

struct TrainLog {
    std::vector<TrainRecord> records;

    void add(TrainRecord r) {
        if (!records.empty() && records.back().stage == r.stage && r.step <= records.back().step)
            throw std::logic_error("train log: step index must increase");
        records.push_back(std::move(r));
    }

    std::vector<TrainRecord> stage(const std::string& name) const {
        std::vector<TrainRecord> out;
        for (const auto& r : records)
            if (r.stage == name) out.push_back(r);
        return out;
    }

    static nlohmann::json record_json(const TrainRecord& r) {
        return {{"stage", r.stage}, {"step", r.step}, {"epoch", r.epoch},
                {"lr", r.lr},       {"loss", r.losses}, {"wall_ms", r.wall_ms}};
    }

    void write_jsonl(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        for (const auto& r : records) out << record_json(r).dump() << '\n';
    }

    /// Loss values only (no timings), for run-to-run comparison.
    std::vector<std::pair<std::string, std::map<std::string, double>>> losses() const {
        std::vector<std::pair<std::string, std::map<std::string, double>>> out;
        for (const auto& r : records) out.emplace_back(r.stage, r.losses);
        return out;
    }
};

class TrainingDiverged : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- heads

template <class T>
void init_pretrain_heads(ParamStore<T>& params, const EncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const std::size_t h = cfg.hidden;
    params.add("rstd.w", {h, 3}, nn::truncated_normal<T>(h * 3, 0.02, rng));
    params.add("rstd.b", {3}, std::vector<T>(3, T(0)));
    params.add("mlm.dense", {h, h}, nn::truncated_normal<T>(h * h, 0.02, rng));
    params.add("mlm.dense.bias", {h}, std::vector<T>(h, T(0)));
    params.add("mlm.ln.g", {h}, std::vector<T>(h, T(1)));
    params.add("mlm.ln.b", {h}, std::vector<T>(h, T(0)));
    params.add("mlm.bias", {cfg.vocab_size}, std::vector<T>(cfg.vocab_size, T(0)));
}

/// Three-way token logits (rows, len, 3).
template <class T>
Tensor<T> rstd_logits(const ParamStore<T>& params, const Tensor<T>& states) {
    return nn::add(nn::matmul(states, params.at("rstd.w")), params.at("rstd.b"));
}

/// Vocabulary logits (positions, vocab) at flat positions of states
/// (rows, len, hidden); the output projection is tied to embed.token.
template <class T>
Tensor<T> mlm_logits(const ParamStore<T>& params, const Tensor<T>& states, std::span<const std::size_t> positions) {
    auto x = nn::gather_rows(states, positions);
    x = nn::gelu(linear(params, "mlm.dense", x));
    x = layer_norm(params, "mlm.ln", x);
    return nn::add(nn::matmul_nt(x, params.at("embed.token")), params.at("mlm.bias"));
}

// ---------------------------------------------------------------- helpers

/// Linear warmup then linear decay to zero.
inline double scheduled_lr(double base, std::size_t step, std::size_t total, double warmup_fraction) {
    if (total == 0) return base;
    const auto warm = static_cast<std::size_t>(std::ceil(warmup_fraction * double(total)));
    if (step < warm) return base * double(step + 1) / double(warm);
    if (total <= warm) return base;
    return base * double(total - step) / double(total - warm);
}

inline std::vector<TokenSeq> tokenize_all(const Vocab& vocab, const std::vector<UrlRecord>& records,
                                          std::size_t max_len) {
    std::vector<TokenSeq> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(encode(vocab, r.url, max_len));
    return out;
}

/// Minibatch index lists for one epoch, shuffled under `seed`.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    return out;
}

inline Batch gather_batch(std::span<const TokenSeq> data, const std::vector<std::size_t>& idx) {
    std::vector<TokenSeq> seqs;
    seqs.reserve(idx.size());
    for (auto i : idx) seqs.push_back(data[i]);
    return make_batch(seqs);
}

inline std::size_t planned_steps(std::size_t n, std::size_t batch_size, std::size_t epochs, std::size_t cap) {
    const std::size_t total = epochs * ((n + batch_size - 1) / batch_size);
    return cap ? std::min(cap, total) : total;
}

template <class T>
void check_finite_loss(double v, const ParamStore<T>& params, const std::optional<std::filesystem::path>& diag,
                       const std::string& where) {
    if (std::isfinite(v)) return;
    if (diag) nn::save_checkpoint<T>(params, *diag, {{"diagnostic", where}});
    throw TrainingDiverged(where + ": non-finite loss" +
                           (diag ? " (diagnostic checkpoint at " + diag->string() + ")" : std::string()));
}

/// Restores requires_grad flags changed for a stage.
template <class T>
class TrainableScope {
  public:
    TrainableScope(ParamStore<T>& params, std::initializer_list<std::string_view> frozen_prefixes)
        : params_(params) {
        for (auto& [name, p] : params_.items()) saved_.emplace_back(name, p.requires_grad());
        for (auto pre : frozen_prefixes) params_.set_trainable(pre, false);
    }
    ~TrainableScope() {
        for (auto& [name, on] : saved_) params_.at(name).set_requires_grad(on);
    }
    TrainableScope(const TrainableScope&) = delete;
    TrainableScope& operator=(const TrainableScope&) = delete;

  private:
    ParamStore<T>& params_;
    std::vector<std::pair<std::string, bool>> saved_;
};

// ---------------------------------------------------------------- stage 1

struct RstdEval {
    double loss = 0;
    double auc = 0;
    std::size_t tokens = 0;
};

/// Held-out stage-1 loss (token-weighted) and the AUC of 1 − p(original)
/// for corrupted-vs-original tokens.
template <class T>
RstdEval evaluate_rstd(const ParamStore<T>& params, const EncoderConfig& enc, std::span<const TokenSeq> data,
                       const PretrainConfig& cfg, std::uint64_t seed) {
    nn::NoGradGuard ng;
    RstdEval ev;
    double total = 0;
    std::vector<double> scores;
    std::vector<int> corrupted;
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0, b = 0; start < data.size(); start += cfg.batch_size, ++b) {
        std::vector<std::size_t> chunk(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(data.size(), start + cfg.batch_size)));
        auto batch = gather_batch(data, chunk);
        const auto rs = corrupt_rstd(batch, cfg.shuffle_rate, cfg.replace_rate, enc.vocab_size, derive_seed(seed, {b}));
        batch.ids = rs.corrupted_ids;
        const auto logits = rstd_logits(params, encode(params, enc, batch).final());
        std::size_t n = 0;
        for (int l : rs.labels) n += l >= 0;
        if (n == 0) continue;
        total += loss_rstd(logits, rs.labels).scalar() * double(n);
        ev.tokens += n;
        const auto p = nn::softmax(logits);
        for (std::size_t i = 0; i < rs.labels.size(); ++i) {
            if (rs.labels[i] < 0) continue;
            scores.push_back(1.0 - double(p.data()[i * 3 + rstd_label::original]));
            corrupted.push_back(rs.labels[i] != rstd_label::original);
        }
    }
    if (ev.tokens == 0) throw std::invalid_argument("evaluate_rstd: no supervised tokens");
    ev.loss = total / double(ev.tokens);
    ev.auc = roc_auc(scores, corrupted);
    return ev;
}

/// Stage 1: corrupt → encode → 3-way token head → loss → AdamW.
template <class T>
TrainLog run_stage1(const PretrainConfig& cfg, const EncoderConfig& enc, std::span<const TokenSeq> data,
                    ParamStore<T>& params, const std::optional<std::filesystem::path>& diagnostic = std::nullopt) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("run_stage1: empty corpus");
    TrainableScope<T> scope(params, {"mlm."});
    nn::AdamW<T> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    const auto total = planned_steps(data.size(), cfg.batch_size, cfg.stage1_epochs, cfg.stage1_max_steps);
    TrainLog log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.stage1_epochs && step < total; ++epoch) {
        for (const auto& idx : epoch_batches(data.size(), cfg.batch_size, derive_seed(cfg.seed, {1, 0, epoch}))) {
            if (step >= total) break;
            const auto t0 = std::chrono::steady_clock::now();
            auto batch = gather_batch(data, idx);
            const auto rs = corrupt_rstd(batch, cfg.shuffle_rate, cfg.replace_rate, enc.vocab_size,
                                         derive_seed(cfg.seed, {1, 1, step}));
            if (std::none_of(rs.labels.begin(), rs.labels.end(), [](int l) { return l >= 0; })) continue;
            batch.ids = rs.corrupted_ids;
            params.zero_grad();
            const auto loss = loss_rstd(rstd_logits(params, encode(params, enc, batch).final()), rs.labels);
            check_finite_loss(loss.scalar(), params, diagnostic, "stage 1");
            loss.value.backward();
            const double lr = scheduled_lr(cfg.lr, step, total, cfg.warmup_fraction);
            opt.step(params, lr);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            log.add({"stage1", step, epoch, lr, {{"rstd", loss.scalar()}}, ms});
            ++step;
        }
    }
    return log;
}

// ---------------------------------------------------------------- stage 2

struct Stage2Losses {
    double con = 0, mlm = 0, vat = 0, total = 0;
};

/// Interleaves each row of `batch` with a copy of itself: rows (r, r).
inline Batch duplicate_rows(const Batch& b) {
    Batch out;
    out.rows = 2 * b.rows;
    out.len = b.len;
    for (std::size_t r = 0; r < b.rows; ++r) {
        for (int k = 0; k < 2; ++k) {
            out.ids.insert(out.ids.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.len),
                           b.ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * b.len));
            out.mask.insert(out.mask.end(), b.mask.begin() + static_cast<std::ptrdiff_t>(r * b.len),
                            b.mask.begin() + static_cast<std::ptrdiff_t>((r + 1) * b.len));
            out.true_len.push_back(b.true_len[r]);
        }
    }
    return out;
}

/// Two embedding views per row, interleaved (rows 2k, 2k+1 come from row k).
template <class T>
Tensor<T> interleave_views(const Tensor<T>& a, const Tensor<T>& b) {
    auto s = nn::stack<T>({a, b}, 1);
    return nn::reshape(s, {2 * a.dim(0), a.dim(1), a.dim(2)});
}

/// Builds the gradients of con + mlm + w·vat for one minibatch in the
/// parameter grads (the caller zeroes and steps). Returns the components.
template <class T>
Stage2Losses stage2_gradients(const PretrainConfig& cfg, const EncoderConfig& enc, const Batch& batch,
                              ParamStore<T>& params, std::uint64_t step_seed) {
    const auto mm = mask_mlm(batch, cfg.mask_rate, enc.vocab_size, derive_seed(step_seed, {0}));
    Batch masked = batch;
    masked.ids = mm.masked_ids;
    std::vector<std::size_t> positions;
    std::vector<int> targets;
    for (std::size_t i = 0; i < mm.targets.size(); ++i) {
        if (mm.targets[i] < 0) continue;
        positions.push_back(i);
        targets.push_back(mm.targets[i]);
    }
    if (positions.empty()) throw std::invalid_argument("stage 2: batch has no maskable tokens");

    // (a) masked LM; its embedding gradient drives FGSM.
    auto emb = embed(params, enc, masked);
    auto logits = mlm_logits(params, encode_from_embeddings(params, enc, emb, masked).final(),
                             std::span<const std::size_t>(positions));
    auto mlm = loss_mlm(logits, targets);
    std::vector<T> emb_grad(emb.size(), T(0));
    mlm.value.backward();
    if (emb.has_grad()) std::copy(emb.grad().begin(), emb.grad().end(), emb_grad.begin());
    params.zero_grad();

    // (b) contrastive loss over two dropout + FGSM views per URL.
    const std::span<const T> g(emb_grad);
    auto v1 = fgsm_step(dropout_augment(emb, cfg.scl_dropout, derive_seed(step_seed, {1})), g, cfg.fgsm_alpha);
    auto v2 = fgsm_step(dropout_augment(emb, cfg.scl_dropout, derive_seed(step_seed, {2})), g, cfg.fgsm_alpha);
    const auto pairs = duplicate_rows(masked);
    auto con = nt_xent(cls_vector(encode_from_embeddings(params, enc, interleave_views(v1, v2), pairs), enc.layers),
                       cfg.tau);

    // (c) virtual adversarial term against the detached pass-(a) distribution.
    const auto target = nn::softmax(logits).detach();
    const auto mask = masked.mask_as<T>();
    PerturbedForward<T> forward = [&](const Tensor<T>& delta, bool frozen) {
        const auto base = frozen ? emb.detach() : emb;
        auto states = encode_from_embeddings(params, enc, nn::add(base, delta), masked).final();
        return nn::softmax(mlm_logits(params, states, std::span<const std::size_t>(positions)));
    };
    auto vat = vat_perturb<T>(forward, target, emb.shape(), std::span<const T>(mask), params, cfg.vat,
                              derive_seed(step_seed, {3}));

    auto total = stage2_loss(con, mlm, vat.loss, cfg.vat_weight);
    total.value.backward();
    return {con.scalar(), mlm.scalar(), vat.loss.scalar(), total.scalar()};
}

/// Stage 2: one AdamW step per minibatch on con + mlm + 10·vat.
template <class T>
TrainLog run_stage2(const PretrainConfig& cfg, const EncoderConfig& enc, std::span<const TokenSeq> data,
                    ParamStore<T>& params, const std::optional<std::filesystem::path>& diagnostic = std::nullopt) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("run_stage2: empty corpus");
    TrainableScope<T> scope(params, {"rstd."});
    nn::AdamW<T> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    const auto total = planned_steps(data.size(), cfg.batch_size, cfg.stage2_epochs, cfg.stage2_max_steps);
    TrainLog log;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.stage2_epochs && step < total; ++epoch) {
        for (const auto& idx : epoch_batches(data.size(), cfg.batch_size, derive_seed(cfg.seed, {2, 0, epoch}))) {
            if (step >= total) break;
            if (idx.size() < 2) continue;
            const auto t0 = std::chrono::steady_clock::now();
            const auto batch = gather_batch(data, idx);
            if (std::all_of(batch.true_len.begin(), batch.true_len.end(), [](auto l) { return l < 2; })) continue;
            params.zero_grad();
            const auto parts = stage2_gradients(cfg, enc, batch, params, derive_seed(cfg.seed, {2, 1, step}));
            check_finite_loss(parts.total, params, diagnostic, "stage 2");
            const double lr = scheduled_lr(cfg.lr, step, total, cfg.warmup_fraction);
            opt.step(params, lr);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            log.add({"stage2", step, epoch, lr,
                     {{"con", parts.con}, {"mlm", parts.mlm}, {"vat", parts.vat}, {"total", parts.total}}, ms});
            ++step;
        }
    }
    return log;
}

/// Mean cosine between the two dropout views of the same URL minus the
/// mean cosine between views of different URLs (final-layer CLS).
template <class T>
double alignment_gap(const ParamStore<T>& params, const EncoderConfig& enc, std::span<const TokenSeq> data,
                     double dropout_p, std::uint64_t seed) {
    if (data.size() < 2) throw std::invalid_argument("alignment_gap: needs at least 2 sequences");
    nn::NoGradGuard ng;
    const auto batch = make_batch(data);
    const auto emb = embed(params, enc, batch);
    auto views = interleave_views(dropout_augment(emb, dropout_p, derive_seed(seed, {1})),
                                  dropout_augment(emb, dropout_p, derive_seed(seed, {2})));
    const auto z = nn::l2_normalize(cls_vector(encode_from_embeddings(params, enc, views, duplicate_rows(batch)), enc.layers));
    const auto sim = nn::matmul_nt(z, z);
    const std::size_t m = z.dim(0);
    double pos = 0, neg = 0;
    std::size_t npos = 0, nneg = 0;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            const double s = double(sim.data()[i * m + j]);
            if (i / 2 == j / 2) {
                pos += s;
                ++npos;
            } else {
                neg += s;
                ++nneg;
            }
        }
    }
    return pos / double(npos) - neg / double(nneg);
}

// ---------------------------------------------------------------- orchestration

inline nlohmann::json head_specs_json(const EncoderConfig& enc) {
    return nlohmann::json::array({{{"name", "rstd"}, {"classes", 3}},
                                  {{"name", "mlm"}, {"classes", enc.vocab_size}, {"tied_to", "embed.token"}}});
}

inline nlohmann::json pretrain_metadata(const EncoderConfig& enc, const Vocab& vocab, const PretrainConfig& cfg,
                                        int stage, nlohmann::json lineage) {
    return {{"kind", "pretrain"}, {"stage", stage},          {"encoder", enc},
            {"vocab", vocab.to_json()}, {"pretrain", cfg}, {"heads", head_specs_json(enc)},
            {"lineage", std::move(lineage)}};
}

template <class T>
struct PretrainResult {
    ParamStore<T> params;
    TrainLog log;
    nlohmann::json stage1_manifest;
    nlohmann::json stage2_manifest;
    std::string stage1_checksum;
    std::string stage2_initial_checksum;
};

struct PretrainOptions {
    bool skip_stage1 = false;
    bool stage1_only = false;
};

/// Fresh encoder + heads, stage 1, stage 2; both checkpoints are kept in
/// `out_dir` as stage1.* and stage2.* with lineage in the manifests.
template <class T>
PretrainResult<T> pretrain_all(const PretrainConfig& cfg, const EncoderConfig& enc, const Vocab& vocab,
                               std::span<const TokenSeq> data, const std::filesystem::path& out_dir,
                               const PretrainOptions& opts = {},
                               const std::function<void(int, const ParamStore<T>&)>& on_stage = {}) {
    cfg.validate();
    enc.validate();
    if (vocab.size() != enc.vocab_size) throw std::invalid_argument("pretrain: vocab size differs from encoder config");
    if (opts.skip_stage1 && opts.stage1_only) throw std::invalid_argument("pretrain: nothing to run");
    std::filesystem::create_directories(out_dir);
    PretrainResult<T> res;
    init_encoder(res.params, enc, derive_seed(cfg.seed, {0, 0}));
    init_pretrain_heads(res.params, enc, derive_seed(cfg.seed, {0, 1}));
    const auto diag = out_dir / "diagnostic";
    nlohmann::json lineage1{{"parent", nullptr}, {"stage1_skipped", opts.skip_stage1}};
    if (!opts.skip_stage1) {
        res.log = run_stage1(cfg, enc, data, res.params, diag);
    }
    res.stage1_manifest =
        nn::save_checkpoint<T>(res.params, out_dir / "stage1", pretrain_metadata(enc, vocab, cfg, 1, lineage1));
    res.stage1_checksum = res.stage1_manifest["checksum"];
    if (on_stage) on_stage(1, res.params);
    if (opts.stage1_only) {
        res.log.write_jsonl(out_dir / "train_log.jsonl");
        return res;
    }

    res.stage2_initial_checksum = nn::hex64(res.params.checksum());
    auto log2 = run_stage2(cfg, enc, data, res.params, diag);
    for (auto& r : log2.records) res.log.records.push_back(std::move(r));
    nlohmann::json lineage2{{"parent", res.stage1_checksum},
                            {"initial_checksum", res.stage2_initial_checksum},
                            {"stage1_skipped", opts.skip_stage1}};
    res.stage2_manifest =
        nn::save_checkpoint<T>(res.params, out_dir / "stage2", pretrain_metadata(enc, vocab, cfg, 2, lineage2));
    res.log.write_jsonl(out_dir / "train_log.jsonl");
    if (on_stage) on_stage(2, res.params);
    return res;
}

}  // namespace urlbert
