// Task heads over encoder states, layer/pooling variants, two-stage and
// multi-task fine-tuning.
#pragma once

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "urlbert/corpus.hpp"
#include "urlbert/encoder.hpp"
#include "urlbert/metrics.hpp"
#include "urlbert/nn/optim.hpp"
#include "urlbert/objectives.hpp"
#include "urlbert/pretrain.hpp"
#include "urlbert/seed.hpp"

namespace urlbert {

enum class HeadKind { cnn, cls_layer, last4_concat, last4_mean, last4_max, last4_min, last4_weighted, last4_attention };

struct HeadSpec {
    HeadKind kind = HeadKind::cnn;
    /// Hidden-stack index for cls_layer (0 = embeddings, depth = final).
    std::size_t layer = 0;
    std::size_t num_classes = 2;
    std::size_t filters = 64;
    std::size_t kernel = 3;

    bool uses_last4() const { return kind != HeadKind::cnn && kind != HeadKind::cls_layer; }

    void validate(std::size_t depth) const {
        if (num_classes < 2) throw std::invalid_argument("head: num_classes must be >= 2");
        if (kind == HeadKind::cls_layer && layer > depth)
            throw std::invalid_argument("head: cls_layer " + std::to_string(layer) + " beyond encoder depth " +
                                        std::to_string(depth));
        if (uses_last4() && depth < 4)
            throw std::invalid_argument("head: last-4 pooling needs an encoder with at least 4 layers, got " +
                                        std::to_string(depth));
        if (kind == HeadKind::cnn && (filters == 0 || kernel == 0 || kernel % 2 == 0))
            throw std::invalid_argument("head: cnn needs filters > 0 and an odd kernel");
    }

    std::string name() const {
        switch (kind) {
            case HeadKind::cnn: return "cnn";
            case HeadKind::cls_layer: return "cls_layer:" + std::to_string(layer);
            case HeadKind::last4_concat: return "last4_concat";
            case HeadKind::last4_mean: return "last4_mean";
            case HeadKind::last4_max: return "last4_max";
            case HeadKind::last4_min: return "last4_min";
            case HeadKind::last4_weighted: return "last4_weighted";
            case HeadKind::last4_attention: return "last4_attention";
        }
        return "?";
    }

    /// Width of the pooled feature (not meaningful for cnn).
    std::size_t feature_dim(std::size_t hidden) const { return kind == HeadKind::last4_concat ? 4 * hidden : hidden; }
};

/// Accepts "cnn", "cls_layer:K" (or "cls_layer(K)") and the last4_* names.
inline HeadSpec parse_head(std::string_view text, std::size_t num_classes) {
    HeadSpec h;
    h.num_classes = num_classes;
    static const std::map<std::string, HeadKind, std::less<>> kinds{
        {"cnn", HeadKind::cnn},
        {"cnn_head", HeadKind::cnn},
        {"last4_concat", HeadKind::last4_concat},
        {"last4_mean", HeadKind::last4_mean},
        {"last4_max", HeadKind::last4_max},
        {"last4_min", HeadKind::last4_min},
        {"last4_weighted", HeadKind::last4_weighted},
        {"last4_attention", HeadKind::last4_attention}};
    if (text.starts_with("cls_layer")) {
        const auto colon = text.find_first_of(":(");
        if (colon == std::string_view::npos) throw std::invalid_argument("head: cls_layer needs a layer, e.g. cls_layer:3");
        std::string digits;
        for (char c : text.substr(colon + 1))
            if (c != ')') digits += c;
        std::size_t used = 0;
        try {
            h.layer = std::stoul(digits, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (digits.empty() || used != digits.size())
            throw std::invalid_argument("head: bad layer in '" + std::string(text) + "'");
        h.kind = HeadKind::cls_layer;
        return h;
    }
    auto it = kinds.find(text);
    if (it == kinds.end()) throw std::invalid_argument("head: unknown kind '" + std::string(text) + "'");
    h.kind = it->second;
    return h;
}

/// The ten layer/pooling variants for an encoder of the given depth: the
/// four top layers singly, then the six last-4 poolings.
inline std::vector<HeadSpec> ablation_heads(std::size_t depth, std::size_t num_classes) {
    if (depth < 4) throw std::invalid_argument("ablation needs an encoder with at least 4 layers");
    std::vector<HeadSpec> out;
    for (std::size_t k = depth - 3; k <= depth; ++k) out.push_back({HeadKind::cls_layer, k, num_classes});
    for (auto kind : {HeadKind::last4_concat, HeadKind::last4_mean, HeadKind::last4_max, HeadKind::last4_min,
                      HeadKind::last4_weighted, HeadKind::last4_attention})
        out.push_back({kind, 0, num_classes});
    return out;
}

inline std::string head_prefix(const std::string& task) { return "head." + task + "."; }

template <class T>
void init_head(ParamStore<T>& params, const std::string& prefix, const HeadSpec& spec, std::size_t hidden,
               std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto dense = [&](const std::string& name, std::size_t in, std::size_t out) {
        params.add(prefix + name, {in, out}, nn::truncated_normal<T>(in * out, 0.02, rng));
        params.add(prefix + name + ".bias", {out}, std::vector<T>(out, T(0)));
    };
    if (spec.kind == HeadKind::cnn) {
        dense("conv", spec.kernel * hidden, spec.filters);
        dense("out", spec.filters, spec.num_classes);
        return;
    }
    if (spec.kind == HeadKind::last4_weighted) params.add(prefix + "layer_logits", {4}, std::vector<T>(4, T(0)));
    if (spec.kind == HeadKind::last4_attention)
        params.add(prefix + "query", {hidden, 1}, nn::truncated_normal<T>(hidden, 0.02, rng));
    dense("out", spec.feature_dim(hidden), spec.num_classes);
}

/// The four top-layer CLS vectors stacked as (B, 4, H).
template <class T>
Tensor<T> last4_cls(const HiddenStack<T>& stack) {
    const std::size_t d = stack.depth();
    if (d < 4) throw std::invalid_argument("last-4 pooling needs an encoder with at least 4 layers");
    std::vector<Tensor<T>> parts;
    for (std::size_t k = d - 3; k <= d; ++k) parts.push_back(cls_vector(stack, k));
    return nn::stack(parts, 1);
}

/// Pooled CLS features (B, feature_dim) for every kind except cnn.
template <class T>
Tensor<T> pool(const ParamStore<T>& params, const std::string& prefix, const HiddenStack<T>& stack,
               const HeadSpec& spec) {
    spec.validate(stack.depth());
    switch (spec.kind) {
        case HeadKind::cnn: throw std::invalid_argument("pool: cnn head has no pooled feature");
        case HeadKind::cls_layer: return cls_vector(stack, spec.layer);
        case HeadKind::last4_concat: {
            const std::size_t d = stack.depth();
            std::vector<Tensor<T>> parts;
            for (std::size_t k = d - 3; k <= d; ++k) parts.push_back(cls_vector(stack, k));
            return nn::concat(parts);
        }
        case HeadKind::last4_mean: return nn::reduce(last4_cls(stack), 1, nn::Reduce::mean);
        case HeadKind::last4_max: return nn::reduce(last4_cls(stack), 1, nn::Reduce::max);
        case HeadKind::last4_min: return nn::reduce(last4_cls(stack), 1, nn::Reduce::min);
        case HeadKind::last4_weighted:
            return nn::weighted_sum(last4_cls(stack), nn::softmax(params.at(prefix + "layer_logits")));
        case HeadKind::last4_attention: {
            auto layers = last4_cls(stack);
            const std::size_t b = layers.dim(0);
            auto scores = nn::reshape(nn::matmul(layers, params.at(prefix + "query")), {b, 4});
            return nn::weighted_sum(layers, nn::softmax(scores));
        }
    }
    throw std::logic_error("pool: unhandled kind");
}

/// Kernel-width convolution over tokens (pad states zeroed), gelu, max over
/// real positions, dense layer.
template <class T>
Tensor<T> cnn_head_forward(const ParamStore<T>& params, const std::string& prefix, const Tensor<T>& states,
                           std::span<const T> mask, std::size_t kernel = 3) {
    if (states.rank() != 3) nn::shape_fail("cnn_head", states.shape(), "must be (batch, len, hidden)");
    if (states.dim(1) < kernel)
        throw std::invalid_argument("cnn_head: sequence length " + std::to_string(states.dim(1)) +
                                    " shorter than kernel " + std::to_string(kernel));
    auto real = nn::scale_positions(states, mask);
    auto conv = nn::gelu(linear(params, prefix + "conv", nn::unfold_same(real, kernel)));
    return linear(params, prefix + "out", nn::masked_max_time(conv, mask));
}

template <class T>
Tensor<T> head_logits(const ParamStore<T>& params, const std::string& prefix, const HeadSpec& spec,
                      const HiddenStack<T>& stack, const Batch& batch) {
    if (spec.kind == HeadKind::cnn) {
        const auto mask = batch.mask_as<T>();
        return cnn_head_forward(params, prefix, stack.final(), std::span<const T>(mask), spec.kernel);
    }
    return linear(params, prefix + "out", pool(params, prefix, stack, spec));
}

// ---------------------------------------------------------------- data

struct LabeledTokens {
    std::vector<TokenSeq> seqs;
    std::vector<int> labels;
    std::size_t size() const { return seqs.size(); }
};

inline LabeledTokens tokenize_labeled(const Vocab& vocab, const std::vector<UrlRecord>& records, std::size_t max_len) {
    LabeledTokens out;
    for (const auto& r : records) {
        if (!r.label) throw std::invalid_argument("labeled dataset contains a record without a label: " + r.url);
        out.seqs.push_back(encode(vocab, r.url, max_len));
        out.labels.push_back(*r.label);
    }
    return out;
}

/// Trimmed batch, widened to at least `min_len` positions when possible.
inline Batch head_batch(std::span<const TokenSeq> seqs, std::size_t min_len) {
    auto b = make_batch(seqs);
    if (b.len < min_len && !seqs.empty() && seqs[0].ids.size() >= min_len) {
        b = make_batch(seqs, false);
        const std::size_t full = b.len;
        Batch cut;
        cut.rows = b.rows;
        cut.len = min_len;
        cut.true_len = b.true_len;
        for (std::size_t r = 0; r < b.rows; ++r) {
            cut.ids.insert(cut.ids.end(), b.ids.begin() + std::ptrdiff_t(r * full),
                           b.ids.begin() + std::ptrdiff_t(r * full + min_len));
            cut.mask.insert(cut.mask.end(), b.mask.begin() + std::ptrdiff_t(r * full),
                            b.mask.begin() + std::ptrdiff_t(r * full + min_len));
        }
        b = std::move(cut);
    }
    return b;
}

inline std::size_t min_len_for(const HeadSpec& spec) { return spec.kind == HeadKind::cnn ? spec.kernel : 1; }

struct Subset {
    Batch batch;
    std::vector<int> labels;
};

inline Subset gather_labeled(const LabeledTokens& data, std::span<const std::size_t> idx, const HeadSpec& spec) {
    std::vector<TokenSeq> seqs;
    Subset s;
    for (auto i : idx) {
        seqs.push_back(data.seqs.at(i));
        s.labels.push_back(data.labels.at(i));
    }
    s.batch = head_batch(seqs, min_len_for(spec));
    return s;
}

/// Checksum over the encoder tensors only (embeddings and layers).
template <class T>
std::uint64_t encoder_checksum(const ParamStore<T>& params) {
    return mix64(params.checksum("embed.") ^ mix64(params.checksum("layer")));
}

/// Removes pre-training heads (rstd.*, mlm.*) from a loaded store.
template <class T>
void strip_pretrain_heads(ParamStore<T>& params) {
    std::vector<std::string> drop;
    for (const auto& [name, p] : params.items())
        if (name.starts_with("rstd.") || name.starts_with("mlm.")) drop.push_back(name);
    for (const auto& n : drop) params.erase(n);
}

struct TaskSpec {
    std::string name;
    int task_id = 0;
    HeadSpec head;
};

struct TaskScores {
    std::size_t classes = 0;
    std::vector<int> predicted;
    /// rows × classes, row-major.
    std::vector<double> probs;
};

/// Class probabilities and hard predictions for a whole dataset.
template <class T>
TaskScores predict_task(const ParamStore<T>& params, const EncoderConfig& enc, const TaskSpec& task,
                        const LabeledTokens& data, std::size_t batch_size = 64) {
    if (data.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
    nn::NoGradGuard ng;
    const auto prefix = head_prefix(task.name);
    TaskScores out;
    out.classes = task.head.num_classes;
    const std::size_t c = out.classes;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.size(); start += batch_size) {
        idx.resize(std::min(batch_size, data.size() - start));
        std::iota(idx.begin(), idx.end(), start);
        const auto sub = gather_labeled(data, idx, task.head);
        const auto p = nn::softmax(head_logits(params, prefix, task.head, encode(params, enc, sub.batch), sub.batch));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto row = p.data().subspan(r * c, c);
            out.predicted.push_back(int(std::max_element(row.begin(), row.end()) - row.begin()));
            for (auto v : row) out.probs.push_back(double(v));
        }
    }
    return out;
}

template <class T>
Metrics evaluate_task(const ParamStore<T>& params, const EncoderConfig& enc, const TaskSpec& task,
                      const LabeledTokens& data, std::size_t batch_size = 64) {
    const auto s = predict_task(params, enc, task, data, batch_size);
    const bool both = std::set<int>(data.labels.begin(), data.labels.end()).size() > 1;
    return compute_metrics(s.predicted, data.labels, s.classes,
                           both ? std::span<const double>(s.probs) : std::span<const double>{});
}

// ---------------------------------------------------------------- two-stage

struct FinetuneSchedule {
    double stage_a_lr = 2e-3;
    double stage_b_lr = 2e-5;
    std::size_t stage_a_epochs = 5;
    std::size_t stage_b_epochs = 5;
    std::size_t batch_size = 5;
    double weight_decay = 1e-4;
    std::uint64_t seed = 1;
    /// Caps optimizer steps per stage (0 = no cap).
    std::size_t max_steps_per_stage = 0;
};

inline void to_json(nlohmann::json& j, const FinetuneSchedule& s) {
    j = {{"stage_a_lr", s.stage_a_lr},       {"stage_b_lr", s.stage_b_lr},
         {"stage_a_epochs", s.stage_a_epochs}, {"stage_b_epochs", s.stage_b_epochs},
         {"batch_size", s.batch_size},       {"weight_decay", s.weight_decay},
         {"seed", s.seed},                   {"max_steps_per_stage", s.max_steps_per_stage}};
}

struct EpochMetrics {
    std::string stage;
    std::size_t epoch = 0;
    double train_loss = 0;
    Metrics test;
};

struct FinetuneResult {
    std::optional<Metrics> after_stage_a;
    Metrics final_metrics;
    TrainLog log;
    std::vector<EpochMetrics> epochs;
    std::uint64_t encoder_before_a = 0, encoder_after_a = 0;
};

/// One supervised pass set: `epochs` epochs of shuffled minibatches on a
/// single task, stepping whatever is trainable.
template <class T>
void train_task(ParamStore<T>& params, const EncoderConfig& enc, const TaskSpec& task, const LabeledTokens& train,
                const LabeledTokens* test, double lr, std::size_t epochs, std::size_t batch_size, double wd,
                std::uint64_t seed, std::size_t max_steps, const std::string& stage, FinetuneResult& res) {
    nn::AdamW<T> opt({lr, 0.9, 0.999, 1e-8, wd});
    const auto prefix = head_prefix(task.name);
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        double loss_sum = 0;
        std::size_t nb = 0;
        for (const auto& idx : epoch_batches(train.size(), batch_size, derive_seed(seed, {3, epoch, 0}))) {
            if (max_steps && step >= max_steps) break;
            const auto t0 = std::chrono::steady_clock::now();
            const auto sub = gather_labeled(train, idx, task.head);
            params.zero_grad();
            auto loss = loss_cls(head_logits(params, prefix, task.head, encode(params, enc, sub.batch), sub.batch),
                                 std::span<const int>(sub.labels));
            if (!std::isfinite(loss.scalar())) throw TrainingDiverged(stage + ": non-finite loss");
            loss.value.backward();
            opt.step(params, lr);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            res.log.add({stage, step, epoch, lr, {{"cls", loss.scalar()}}, ms});
            loss_sum += loss.scalar();
            ++nb;
            ++step;
        }
        if (nb == 0) break;
        EpochMetrics em{stage, epoch, loss_sum / double(nb), {}};
        if (test) em.test = evaluate_task(params, enc, task, *test);
        res.epochs.push_back(std::move(em));
    }
}

/// Stage A trains the head with the encoder frozen; stage B trains both.
/// The head is created if absent.
template <class T>
FinetuneResult finetune_two_stage(ParamStore<T>& params, const EncoderConfig& enc, const TaskSpec& task,
                                  const LabeledTokens& train, const LabeledTokens& test,
                                  const FinetuneSchedule& sched) {
    if (train.size() == 0 || test.size() == 0) throw std::invalid_argument("finetune: empty train or test set");
    if (sched.batch_size < 1) throw std::invalid_argument("finetune: batch_size must be >= 1");
    task.head.validate(enc.layers);
    const auto prefix = head_prefix(task.name);
    bool have_head = false;
    for (const auto& [name, p] : params.items()) have_head |= name.starts_with(prefix);
    if (!have_head) init_head(params, prefix, task.head, enc.hidden, derive_seed(sched.seed, {7, std::uint64_t(task.task_id)}));

    FinetuneResult res;
    res.encoder_before_a = encoder_checksum(params);
    if (sched.stage_a_epochs > 0) {
        TrainableScope<T> scope(params, {"embed.", "layer"});
        train_task(params, enc, task, train, &test, sched.stage_a_lr, sched.stage_a_epochs, sched.batch_size,
                   sched.weight_decay, derive_seed(sched.seed, {1}), sched.max_steps_per_stage, "stage_a", res);
        res.after_stage_a = res.epochs.empty() ? evaluate_task(params, enc, task, test) : res.epochs.back().test;
    }
    res.encoder_after_a = encoder_checksum(params);
    if (res.encoder_after_a != res.encoder_before_a)
        throw std::logic_error("finetune: encoder changed during the frozen stage");
    train_task(params, enc, task, train, &test, sched.stage_b_lr, sched.stage_b_epochs, sched.batch_size,
               sched.weight_decay, derive_seed(sched.seed, {2}), sched.max_steps_per_stage, "stage_b", res);
    res.final_metrics = evaluate_task(params, enc, task, test);
    return res;
}

// ---------------------------------------------------------------- multi-task

struct TaskData {
    TaskSpec spec;
    LabeledTokens train, test;
};

struct MultitaskConfig {
    double lr = 2e-5;
    std::size_t epochs = 5;
    std::size_t batch_size = 5;
    double weight_decay = 1e-4;
    std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const MultitaskConfig& c) {
    j = {{"lr", c.lr}, {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"weight_decay", c.weight_decay},
         {"seed", c.seed}};
}

struct TaskBatchRef {
    std::size_t task;
    std::vector<std::size_t> rows;
};

/// Epoch `epoch` of the merged schedule: every task's data is cut into
/// homogeneous minibatches, then all minibatches are shuffled together. A
/// single task keeps the batch order of train_task under the same seed.
inline std::vector<TaskBatchRef> merged_schedule(const std::vector<std::size_t>& sizes, std::size_t batch_size,
                                                 std::uint64_t seed, std::size_t epoch) {
    std::vector<TaskBatchRef> out;
    for (std::size_t t = 0; t < sizes.size(); ++t)
        for (auto& rows : epoch_batches(sizes[t], batch_size, derive_seed(seed, {3, epoch, t})))
            out.push_back({t, std::move(rows)});
    if (sizes.size() > 1) {
        std::mt19937_64 rng(derive_seed(seed, {4, epoch}));
        std::shuffle(out.begin(), out.end(), rng);
    }
    return out;
}

struct MultitaskResult {
    std::vector<Metrics> metrics;
    TrainLog log;
};

/// Shared encoder, one head per task, per-minibatch task loss.
template <class T>
MultitaskResult finetune_multitask(ParamStore<T>& params, const EncoderConfig& enc, const std::vector<TaskData>& tasks,
                                   const MultitaskConfig& cfg) {
    if (tasks.empty()) throw std::invalid_argument("multitask: no tasks");
    std::set<std::string> names;
    std::set<int> ids;
    std::vector<std::size_t> sizes;
    for (const auto& t : tasks) {
        if (t.train.size() == 0) throw std::invalid_argument("multitask: task '" + t.spec.name + "' has no training data");
        if (!names.insert(t.spec.name).second || !ids.insert(t.spec.task_id).second)
            throw std::invalid_argument("multitask: duplicate task '" + t.spec.name + "'");
        t.spec.head.validate(enc.layers);
        const auto prefix = head_prefix(t.spec.name);
        if (!params.contains(prefix + "out"))
            init_head(params, prefix, t.spec.head, enc.hidden, derive_seed(cfg.seed, {7, std::uint64_t(t.spec.task_id)}));
        sizes.push_back(t.train.size());
    }
    nn::AdamW<T> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
    MultitaskResult res;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& ref : merged_schedule(sizes, cfg.batch_size, cfg.seed, epoch)) {
            const auto& task = tasks[ref.task];
            const auto t0 = std::chrono::steady_clock::now();
            const auto sub = gather_labeled(task.train, ref.rows, task.spec.head);
            params.zero_grad();
            auto loss = loss_cls(head_logits(params, head_prefix(task.spec.name), task.spec.head,
                                             encode(params, enc, sub.batch), sub.batch),
                                 std::span<const int>(sub.labels));
            if (!std::isfinite(loss.scalar())) throw TrainingDiverged("multitask: non-finite loss");
            loss.value.backward();
            opt.step(params, cfg.lr);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            res.log.add({"multitask", step++, epoch, cfg.lr,
                         {{"cls", loss.scalar()}, {"task", double(task.spec.task_id)}}, ms});
        }
    }
    for (const auto& t : tasks) res.metrics.push_back(evaluate_task(params, enc, t.spec, t.test));
    return res;
}

// ---------------------------------------------------------------- ablation

struct AblationRow {
    std::string config;
    Metrics metrics;
};

/// Fine-tunes a copy of `pretrained` once per layer/pooling variant.
template <class T>
std::vector<AblationRow> ablate_pooling(const ParamStore<T>& pretrained, const EncoderConfig& enc,
                                        const std::string& task_name, std::size_t num_classes,
                                        const LabeledTokens& train, const LabeledTokens& test,
                                        const FinetuneSchedule& sched) {
    std::vector<AblationRow> rows;
    for (const auto& head : ablation_heads(enc.layers, num_classes)) {
        auto params = pretrained.clone();
        strip_pretrain_heads(params);
        const auto res = finetune_two_stage(params, enc, TaskSpec{task_name, 0, head}, train, test, sched);
        rows.push_back({head.name(), res.final_metrics});
    }
    return rows;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "config,accuracy,precision,recall,f1,auc\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%s\n", r.config.c_str(), r.metrics.accuracy,
                      r.metrics.precision, r.metrics.recall, r.metrics.f1,
                      r.metrics.auc ? std::to_string(*r.metrics.auc).c_str() : "");
        out += buf;
    }
    return out;
}

// ---------------------------------------------------------------- model files

inline void to_json(nlohmann::json& j, const HeadSpec& h) {
    j = {{"kind", h.name()}, {"num_classes", h.num_classes}, {"filters", h.filters}, {"kernel", h.kernel}};
}

inline void from_json(const nlohmann::json& j, HeadSpec& h) {
    h = parse_head(j.at("kind").get<std::string>(), j.at("num_classes").get<std::size_t>());
    h.filters = j.value("filters", h.filters);
    h.kernel = j.value("kernel", h.kernel);
}

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
    j = {{"name", t.name}, {"task_id", t.task_id}, {"head", t.head}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
    t.name = j.at("name");
    t.task_id = j.at("task_id");
    t.head = j.at("head").get<HeadSpec>();
}

/// Parameters plus what is needed to run them: encoder shape, vocabulary,
/// task heads and the manifest metadata.
template <class T>
struct Model {
    ParamStore<T> params;
    EncoderConfig encoder;
    Vocab vocab;
    std::vector<TaskSpec> tasks;
    nlohmann::json metadata;
    std::string checksum;
};

template <class T>
Model<T> load_model(const std::filesystem::path& stem) {
    auto ck = nn::load_checkpoint<T>(stem);
    Model<T> m;
    m.metadata = ck.metadata();
    if (!m.metadata.contains("encoder") || !m.metadata.contains("vocab"))
        throw nn::CheckpointError(stem.string() + ": manifest lacks encoder or vocab metadata");
    m.encoder = m.metadata.at("encoder").template get<EncoderConfig>();
    m.vocab = Vocab::from_json(m.metadata.at("vocab"));
    if (m.metadata.contains("tasks")) m.tasks = m.metadata.at("tasks").template get<std::vector<TaskSpec>>();
    m.params = std::move(ck.params);
    m.checksum = ck.manifest.value("checksum", "");
    return m;
}

template <class T>
nlohmann::json save_model(const Model<T>& m, const std::filesystem::path& stem, nlohmann::json extra = nlohmann::json::object()) {
    nlohmann::json meta = m.metadata.is_object() ? m.metadata : nlohmann::json::object();
    for (auto& [k, v] : extra.items()) meta[k] = v;
    meta["encoder"] = m.encoder;
    meta["vocab"] = m.vocab.to_json();
    meta["tasks"] = m.tasks;
    return nn::save_checkpoint<T>(m.params, stem, meta);
}

}  // namespace urlbert
