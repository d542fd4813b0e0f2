#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "urlbert/urlbert.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace urlbert;

namespace {

struct Root {
    std::uint64_t seed = 1;
    bool f64 = false;
    const CLI::App* app = nullptr;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

/// Root options plus the active subcommand's keys, re-loadable via --config.
std::string resolved_config(const CLI::App& app) {
    const auto subs = app.get_subcommands();
    const std::string active = subs.empty() ? "" : subs.front()->get_name() + ".";
    std::istringstream in(app.config_to_str(true, true));
    std::string out = "; urlbert-lab " + (subs.empty() ? std::string() : subs.front()->get_name()) + "\n", block, line;
    auto flush = [&] {
        const auto key_start = block.rfind('\n', block.size() - 2);
        const auto key = block.substr(key_start == std::string::npos ? 0 : key_start + 1);
        const auto eq = key.find('=');
        const auto dot = key.find('.');
        if (eq != std::string::npos && (dot == std::string::npos || dot > eq || key.starts_with(active)))
            out += "\n" + block;
        block.clear();
    };
    while (std::getline(in, line)) {
        if (line.empty()) {
            if (!block.empty()) flush();
            continue;
        }
        block += line + "\n";
        if (line.front() != ';') flush();
    }
    if (!block.empty()) flush();
    return out;
}

fs::path prepare_out(const Root& root, const fs::path& out) {
    fs::create_directories(out);
    write_text(out / "resolved_config.ini", resolved_config(*root.app));
    return out;
}

std::vector<UrlRecord> maybe_filter(std::vector<UrlRecord> records, std::size_t max_chars) {
    return max_chars ? filter_max_length(records, max_chars) : records;
}

std::size_t class_count(const std::vector<UrlRecord>& a, const std::vector<UrlRecord>& b = {}) {
    int hi = -1;
    for (const auto* v : {&a, &b})
        for (const auto& r : *v) hi = std::max(hi, r.label.value_or(-1));
    if (hi < 1) throw std::invalid_argument("labeled data needs at least 2 classes");
    return std::size_t(hi + 1);
}

struct TaskFiles {
    std::vector<UrlRecord> train, test;
};

TaskFiles load_task(const std::string& train, const std::string& test, double test_fraction, std::uint64_t seed,
                    int task_id, std::size_t max_chars) {
    TaskFiles tf;
    auto records = maybe_filter(load_labeled(train, task_id).records, max_chars);
    if (!test.empty()) {
        tf.train = std::move(records);
        tf.test = maybe_filter(load_labeled(test, task_id).records, max_chars);
    } else {
        auto s = split(records, {1.0 - test_fraction, derive_seed(seed, {11, std::uint64_t(task_id)}), true});
        tf.train = std::move(s.train);
        tf.test = std::move(s.test);
    }
    if (tf.train.empty() || tf.test.empty()) throw std::invalid_argument(train + ": empty train or test split");
    return tf;
}

void write_roc(const fs::path& path, const TaskScores& s, const std::vector<int>& labels) {
    if (s.classes != 2) return;
    std::vector<double> scores;
    std::vector<int> pos;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        scores.push_back(s.probs[i * 2 + 1]);
        pos.push_back(labels[i] == 1);
    }
    if (std::set<int>(pos.begin(), pos.end()).size() < 2) return;
    write_roc_csv(path.string(), roc_curve(scores, pos));
}

json epochs_json(const std::vector<EpochMetrics>& epochs) {
    json out = json::array();
    for (const auto& e : epochs)
        out.push_back({{"stage", e.stage}, {"epoch", e.epoch}, {"train_loss", e.train_loss}, {"test", e.test.to_json()}});
    return out;
}

template <class T>
const TaskSpec& find_task(const Model<T>& m, const std::string& name) {
    if (name.empty()) {
        if (m.tasks.size() != 1)
            throw std::invalid_argument("checkpoint has " + std::to_string(m.tasks.size()) + " tasks; pass --task-name");
        return m.tasks.front();
    }
    for (const auto& t : m.tasks)
        if (t.name == name) return t;
    throw std::invalid_argument("checkpoint has no task '" + name + "'");
}

template <class T>
void upsert_task(Model<T>& m, const TaskSpec& spec) {
    for (auto& t : m.tasks)
        if (t.name == spec.name) {
            t = spec;
            return;
        }
    m.tasks.push_back(spec);
}

// ------------------------------------------------------------------ train-tokenizer

struct TokenizerOpts {
    std::string corpus, out;
    std::size_t vocab_size = 1024, max_chars = 0, max_len = 64;
};

void cmd_train_tokenizer(const Root& root, const TokenizerOpts& o) {
    const auto out = prepare_out(root, o.out);
    const auto records = maybe_filter(load_corpus(o.corpus), o.max_chars);
    const auto vocab = train_vocab(records, o.vocab_size, root.seed);
    vocab.save(out / "vocab.json");
    std::size_t tokens = 0, unk = 0, truncated = 0;
    for (const auto& r : records) {
        const auto seq = encode(vocab, r.url, o.max_len);
        tokens += seq.true_len;
        for (std::size_t i = 0; i < seq.true_len; ++i) unk += seq.ids[i] == special::unk;
        truncated += seq.true_len == o.max_len;
    }
    write_json(out / "metrics.json", {{"records", records.size()},
                                      {"vocab_size", vocab.size()},
                                      {"mean_tokens", double(tokens) / double(records.size())},
                                      {"unk_rate", double(unk) / double(tokens)},
                                      {"truncated", truncated}});
}

// ------------------------------------------------------------------ synth-corpus

struct SynthOpts {
    std::size_t n = 0;
    std::string out, task, grammar = URLBERT_DEFAULT_GRAMMAR;
    int task_id = 0;
    double test_fraction = 0;
};

void cmd_synth_corpus(const Root& root, const SynthOpts& o) {
    const auto out = prepare_out(root, o.out);
    const auto g = load_grammar(o.grammar);
    json summary{{"n", o.n}, {"seed", root.seed}};
    if (o.task.empty()) {
        save_corpus(out / "corpus.txt", synth_corpus(o.n, root.seed, g));
        summary["files"] = {"corpus.txt"};
    } else {
        const auto records = synth_labeled(o.n, root.seed, g, o.task, o.task_id);
        save_label_map(out / (o.task + ".labels.json"), g.task(o.task).families);
        if (o.test_fraction > 0) {
            const auto s = split(records, {1.0 - o.test_fraction, derive_seed(root.seed, {12}), true});
            save_labeled(out / (o.task + ".train.tsv"), s.train);
            save_labeled(out / (o.task + ".test.tsv"), s.test);
            summary["files"] = {o.task + ".train.tsv", o.task + ".test.tsv"};
            summary["train"] = s.train.size();
            summary["test"] = s.test.size();
        } else {
            save_labeled(out / (o.task + ".tsv"), records);
            summary["files"] = {o.task + ".tsv"};
        }
        summary["task"] = o.task;
    }
    write_json(out / "metrics.json", summary);
}

// ------------------------------------------------------------------ pretrain

struct PretrainOpts {
    std::string corpus, out, vocab, init, stage = "all";
    std::size_t vocab_size = 1024, max_chars = 0, eval_rows = 512;
    double heldout = 0.02;
    bool skip_stage1 = false;
    EncoderConfig enc;
    PretrainConfig cfg;
};

template <class T>
void cmd_pretrain(const Root& root, PretrainOpts o) {
    const auto out = prepare_out(root, o.out);
    o.cfg.seed = root.seed;
    if (o.stage == "2" && o.init.empty() && !o.skip_stage1)
        throw std::invalid_argument("stage 2 alone needs --init <stage-1 checkpoint> or --skip-stage1");
    if (o.stage != "2" && !o.init.empty()) throw std::invalid_argument("--init is only used with --stage 2");
    if (o.stage == "1" && o.skip_stage1) throw std::invalid_argument("--skip-stage1 conflicts with --stage 1");

    auto records = maybe_filter(load_corpus(o.corpus), o.max_chars);
    std::vector<UrlRecord> heldout;
    if (o.heldout > 0) {
        auto s = split(records, {1.0 - o.heldout, derive_seed(root.seed, {9}), false});
        records = std::move(s.train);
        heldout = std::move(s.test);
        if (heldout.size() > o.eval_rows) heldout.resize(o.eval_rows);
    }

    json metrics = json::object();
    std::optional<Model<T>> init;
    Vocab vocab;
    if (!o.init.empty()) {
        init = load_model<T>(o.init);
        vocab = init->vocab;
        o.enc = init->encoder;
    } else if (!o.vocab.empty()) {
        vocab = Vocab::load(o.vocab);
    } else {
        vocab = train_vocab(records, o.vocab_size, root.seed);
    }
    vocab.save(out / "vocab.json");
    o.enc.vocab_size = vocab.size();
    const auto data = tokenize_all(vocab, records, o.enc.max_len);
    const auto held = tokenize_all(vocab, heldout, o.enc.max_len);

    auto report = [&](int stage, const ParamStore<T>& params) {
        if (held.size() < 2) return;
        if (stage == 1 && !o.skip_stage1) {
            const auto ev = evaluate_rstd(params, o.enc, held, o.cfg, derive_seed(root.seed, {10, 1}));
            metrics["stage1"] = {{"heldout_loss", ev.loss},
                                 {"heldout_loss_over_ln3", ev.loss / std::log(3.0)},
                                 {"heldout_auc", ev.auc},
                                 {"tokens", ev.tokens}};
        } else if (stage == 2) {
            metrics["stage2"] = {{"alignment_gap", alignment_gap(params, o.enc, std::span(held).first(std::min<std::size_t>(held.size(), 256)),
                                                                 o.cfg.scl_dropout, derive_seed(root.seed, {10, 2}))}};
        }
    };

    if (init) {
        auto params = std::move(init->params);
        const auto parent = init->checksum;
        const auto initial = nn::hex64(params.checksum());
        auto log = run_stage2(o.cfg, o.enc, data, params, out / "diagnostic");
        nlohmann::json lineage{{"parent", parent}, {"initial_checksum", initial}, {"stage1_skipped", false}};
        const auto m = nn::save_checkpoint<T>(params, out / "stage2", pretrain_metadata(o.enc, vocab, o.cfg, 2, lineage));
        log.write_jsonl(out / "train_log.jsonl");
        report(2, params);
        metrics["checksums"] = {{"stage2", m["checksum"]}, {"parent", parent}};
    } else {
        PretrainOptions opts{o.skip_stage1, o.stage == "1"};
        const auto res = pretrain_all<T>(o.cfg, o.enc, vocab, data, out, opts, report);
        metrics["checksums"] = {{"stage1", res.stage1_checksum}};
        if (!res.stage2_manifest.is_null()) metrics["checksums"]["stage2"] = res.stage2_manifest["checksum"];
    }
    write_json(out / "metrics.json", metrics);
}

// ------------------------------------------------------------------ finetune

struct ScheduleOpts {
    FinetuneSchedule sched;
    std::size_t max_chars = 0;
    double test_fraction = 0.2;
};

void add_schedule(CLI::App* sub, ScheduleOpts& s) {
    sub->add_option("--stage-a-lr", s.sched.stage_a_lr, "Learning rate with the encoder frozen")->capture_default_str();
    sub->add_option("--stage-b-lr", s.sched.stage_b_lr, "Learning rate for full fine-tuning")->capture_default_str();
    sub->add_option("--stage-a-epochs", s.sched.stage_a_epochs)->capture_default_str();
    sub->add_option("--stage-b-epochs", s.sched.stage_b_epochs)->capture_default_str();
    sub->add_option("--batch-size", s.sched.batch_size)->capture_default_str();
    sub->add_option("--weight-decay", s.sched.weight_decay)->capture_default_str();
    sub->add_option("--max-steps-per-stage", s.sched.max_steps_per_stage, "0 = no cap")->capture_default_str();
    sub->add_option("--test-fraction", s.test_fraction, "Held-out share when --test is absent")
        ->check(CLI::Range(0.01, 0.99))
        ->capture_default_str();
    sub->add_option("--max-chars", s.max_chars, "Drop URLs longer than this (0 = keep all)")->capture_default_str();
}

struct FinetuneOpts {
    std::string checkpoint, task, test, task_name = "task", head = "cnn", out;
    int task_id = 0;
    bool two_stage = false;
    ScheduleOpts s;
};

template <class T>
void cmd_finetune(const Root& root, FinetuneOpts o) {
    const auto out = prepare_out(root, o.out);
    o.s.sched.seed = root.seed;
    if (!o.two_stage) o.s.sched.stage_a_epochs = 0;
    auto model = load_model<T>(o.checkpoint);
    const auto parent = model.checksum;
    strip_pretrain_heads(model.params);
    const auto files = load_task(o.task, o.test, o.s.test_fraction, root.seed, o.task_id, o.s.max_chars);
    const TaskSpec spec{o.task_name, o.task_id, parse_head(o.head, class_count(files.train, files.test))};
    const auto train = tokenize_labeled(model.vocab, files.train, model.encoder.max_len);
    const auto test = tokenize_labeled(model.vocab, files.test, model.encoder.max_len);
    const auto res = finetune_two_stage(model.params, model.encoder, spec, train, test, o.s.sched);
    upsert_task(model, spec);
    model.metadata["kind"] = "finetuned";
    const auto m = save_model(model, out / "model", {{"parent", parent}, {"finetune", o.s.sched}});

    json metrics{{"task", spec},
                 {"test", res.final_metrics.to_json()},
                 {"after_stage_a", res.after_stage_a ? res.after_stage_a->to_json() : json(nullptr)},
                 {"encoder_checksum_before_stage_a", nn::hex64(res.encoder_before_a)},
                 {"encoder_checksum_after_stage_a", nn::hex64(res.encoder_after_a)},
                 {"checkpoint", m["checksum"]},
                 {"parent", parent},
                 {"epochs", epochs_json(res.epochs)}};
    write_json(out / "metrics.json", metrics);
    res.log.write_jsonl(out / "train_log.jsonl");
    write_roc(out / "roc.csv", predict_task(model.params, model.encoder, spec, test), test.labels);
}

// ------------------------------------------------------------------ finetune-mt

struct MultitaskOpts {
    std::string checkpoint, out;
    std::vector<std::string> tasks, tests, names, heads{"cnn"};
    double test_fraction = 0.2;
    std::size_t max_chars = 0;
    MultitaskConfig cfg;
};

template <class T>
void cmd_finetune_mt(const Root& root, MultitaskOpts o) {
    const auto out = prepare_out(root, o.out);
    o.cfg.seed = root.seed;
    const auto n = o.tasks.size();
    if (!o.tests.empty() && o.tests.size() != n) throw std::invalid_argument("--tests must list one file per task");
    if (!o.names.empty() && o.names.size() != n) throw std::invalid_argument("--names must list one name per task");
    if (o.heads.size() != 1 && o.heads.size() != n) throw std::invalid_argument("--heads must list 1 or one per task");
    auto model = load_model<T>(o.checkpoint);
    const auto parent = model.checksum;
    strip_pretrain_heads(model.params);
    std::vector<TaskData> tasks;
    for (std::size_t i = 0; i < n; ++i) {
        const int id = int(i);
        const auto files = load_task(o.tasks[i], o.tests.empty() ? "" : o.tests[i], o.test_fraction, root.seed, id, o.max_chars);
        const auto file = fs::path(o.tasks[i]).filename().string();
        const auto name = o.names.empty() ? file.substr(0, file.find('.')) : o.names[i];
        const auto head = parse_head(o.heads.size() == 1 ? o.heads[0] : o.heads[i], class_count(files.train, files.test));
        tasks.push_back({{name, id, head},
                         tokenize_labeled(model.vocab, files.train, model.encoder.max_len),
                         tokenize_labeled(model.vocab, files.test, model.encoder.max_len)});
    }
    const auto res = finetune_multitask(model.params, model.encoder, tasks, o.cfg);
    for (const auto& t : tasks) upsert_task(model, t.spec);
    model.metadata["kind"] = "finetuned";
    const auto m = save_model(model, out / "model", {{"parent", parent}, {"multitask", o.cfg}});
    json metrics{{"checkpoint", m["checksum"]}, {"parent", parent}, {"tasks", json::object()}};
    for (std::size_t i = 0; i < n; ++i) {
        metrics["tasks"][tasks[i].spec.name] = {{"task", tasks[i].spec}, {"test", res.metrics[i].to_json()}};
        write_roc(out / ("roc_" + tasks[i].spec.name + ".csv"),
                  predict_task(model.params, model.encoder, tasks[i].spec, tasks[i].test), tasks[i].test.labels);
    }
    write_json(out / "metrics.json", metrics);
    res.log.write_jsonl(out / "train_log.jsonl");
}

// ------------------------------------------------------------------ extract-features

struct FeatureOpts {
    std::string checkpoint, data, pool, task_name, out;
    std::size_t batch_size = 64;
};

template <class T>
void cmd_extract_features(const Root& root, const FeatureOpts& o) {
    const auto out = prepare_out(root, o.out);
    const auto model = load_model<T>(o.checkpoint);
    const auto records = load_labeled(o.data, 0).records;
    const auto data = tokenize_labeled(model.vocab, records, model.encoder.max_len);
    HeadSpec spec;
    std::string prefix;
    if (!o.task_name.empty()) {
        const auto& task = find_task(model, o.task_name);
        spec = task.head;
        prefix = head_prefix(task.name);
        if (!o.pool.empty() && parse_head(o.pool, spec.num_classes).name() != spec.name())
            throw std::invalid_argument("--pool differs from the head of task " + task.name);
    } else {
        spec = parse_head(o.pool.empty() ? "cls_layer:" + std::to_string(model.encoder.layers) : o.pool, 2);
    }
    auto fm = extract_features(model.params, model.encoder, data, spec, prefix, o.batch_size);
    fm.source["data"] = o.data;
    save_features(fm, out / "features");
    write_json(out / "metrics.json", {{"rows", fm.rows}, {"dim", fm.dim}, {"source", fm.source}});
}

// ------------------------------------------------------------------ evaluate

struct EvaluateOpts {
    std::string checkpoint, data, task_name, train_features, test_features, classifier = "lr", out;
    std::size_t k = 5;
    double var_smoothing = 1e-9;
    LogisticConfig logistic;
};

template <class T>
void cmd_evaluate(const Root& root, const EvaluateOpts& o) {
    const auto out = prepare_out(root, o.out);
    const bool features = !o.train_features.empty() || !o.test_features.empty();
    if (features == !o.checkpoint.empty())
        throw std::invalid_argument("pass either --checkpoint with --data, or --train-features with --test-features");
    if (!features) {
        if (o.data.empty()) throw std::invalid_argument("--checkpoint needs --data");
        const auto model = load_model<T>(o.checkpoint);
        const auto& task = find_task(model, o.task_name);
        const auto data = tokenize_labeled(model.vocab, load_labeled(o.data, task.task_id).records, model.encoder.max_len);
        const auto s = predict_task(model.params, model.encoder, task, data);
        const bool both = std::set<int>(data.labels.begin(), data.labels.end()).size() > 1;
        const auto m = compute_metrics(s.predicted, data.labels, s.classes,
                                       both ? std::span<const double>(s.probs) : std::span<const double>{});
        write_json(out / "metrics.json", {{"task", task}, {"checkpoint", model.checksum}, {"test", m.to_json()}});
        write_roc(out / "roc.csv", s, data.labels);
        return;
    }
    if (o.train_features.empty() || o.test_features.empty())
        throw std::invalid_argument("--train-features and --test-features go together");
    const auto train = load_features(o.train_features), test = load_features(o.test_features);
    Predictions p;
    if (o.classifier == "knn")
        p = classify_knn(train, test, o.k);
    else if (o.classifier == "lr")
        p = classify_lr(train, test, o.logistic);
    else
        p = classify_gnb(train, test, o.var_smoothing);
    write_json(out / "metrics.json", {{"classifier", o.classifier}, {"test", p.metrics(test.labels).to_json()}});
    if (p.classes == 2) write_roc(out / "roc.csv", TaskScores{p.classes, p.labels, p.probs}, test.labels);
}

// ------------------------------------------------------------------ ablate-pooling

struct AblateOpts {
    std::string checkpoint, task, test, task_name = "task", out;
    ScheduleOpts s;
};

template <class T>
void cmd_ablate_pooling(const Root& root, AblateOpts o) {
    const auto out = prepare_out(root, o.out);
    o.s.sched.seed = root.seed;
    const auto model = load_model<T>(o.checkpoint);
    const auto files = load_task(o.task, o.test, o.s.test_fraction, root.seed, 0, o.s.max_chars);
    const auto train = tokenize_labeled(model.vocab, files.train, model.encoder.max_len);
    const auto test = tokenize_labeled(model.vocab, files.test, model.encoder.max_len);
    const auto rows = ablate_pooling(model.params, model.encoder, o.task_name, class_count(files.train, files.test),
                                     train, test, o.s.sched);
    write_text(out / "ablation.csv", ablation_csv(rows));
    json j{{"checkpoint", model.checksum}, {"schedule", o.s.sched}, {"rows", json::array()}};
    for (const auto& r : rows) j["rows"].push_back({{"config", r.config}, {"test", r.metrics.to_json()}});
    write_json(out / "metrics.json", j);
}

// ------------------------------------------------------------------ dump-corruption

struct CorruptionOpts {
    std::string corpus, vocab, checkpoint, out;
    std::size_t n = 4, max_len = 64;
    double shuffle_rate = 0.05, replace_rate = 0.05, mask_rate = 0.15;
};

void cmd_dump_corruption(const Root& root, const CorruptionOpts& o) {
    const auto out = prepare_out(root, o.out);
    if (o.vocab.empty() == o.checkpoint.empty()) throw std::invalid_argument("pass exactly one of --vocab, --checkpoint");
    std::size_t max_len = o.max_len;
    Vocab vocab;
    if (!o.vocab.empty()) {
        vocab = Vocab::load(o.vocab);
    } else {
        const auto m = load_model<float>(o.checkpoint);
        vocab = m.vocab;
        max_len = m.encoder.max_len;
    }
    auto records = load_corpus(o.corpus);
    if (records.size() > o.n) records.resize(o.n);
    const auto seqs = tokenize_all(vocab, records, max_len);
    const auto batch = make_batch(seqs);
    const auto rstd = corrupt_rstd(batch, o.shuffle_rate, o.replace_rate, vocab.size(), derive_seed(root.seed, {1, 1, 0}));
    const auto mlm = mask_mlm(batch, o.mask_rate, vocab.size(), derive_seed(root.seed, {2, 1, 0}));
    write_text(out / "corruption_audit.txt",
               "# position\ttoken\tcorrupted\tlabel\tmasked\tmlm_target\n" + corruption_audit(vocab, batch, rstd, mlm));
    std::size_t counts[3] = {0, 0, 0};
    for (int l : rstd.labels)
        if (l >= 0) ++counts[l];
    write_json(out / "metrics.json", {{"sequences", batch.rows},
                                      {"shuffled", counts[0]},
                                      {"replaced", counts[1]},
                                      {"original", counts[2]}});
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* t = std::getenv("URLBERT_LAB_THREADS")) Eigen::setNbThreads(std::max(1, std::atoi(t)));

    CLI::App app{"urlBERT desk-scale lab", "urlbert-lab"};
    app.config_formatter(std::make_shared<CLI::ConfigINI>());
    app.set_config("--config", "", "INI file; [section] names match subcommands, flags override it");
    app.require_subcommand(1);
    app.fallthrough();
    Root root;
    root.app = &app;
    app.add_option("--seed", root.seed, "Root seed for all randomness")->capture_default_str();
    app.add_flag("--f64", root.f64, "Run models in 64-bit floating point");

    TokenizerOpts tok;
    auto* s_tok = app.add_subcommand("train-tokenizer", "Learn a WordPiece vocabulary from a URL corpus");
    s_tok->add_option("--corpus", tok.corpus, "One URL per line")->required()->check(CLI::ExistingFile);
    s_tok->add_option("--out", tok.out, "Output directory")->required();
    s_tok->add_option("--vocab-size", tok.vocab_size)->capture_default_str();
    s_tok->add_option("--max-len", tok.max_len, "Sequence length used for the coverage report")->capture_default_str();
    s_tok->add_option("--max-chars", tok.max_chars, "Drop URLs longer than this (0 = keep all)")->capture_default_str();

    SynthOpts syn;
    auto* s_syn = app.add_subcommand("synth-corpus", "Generate synthetic URLs from the grammar");
    s_syn->add_option("--n", syn.n, "Number of URLs")->required()->check(CLI::PositiveNumber);
    s_syn->add_option("--out", syn.out, "Output directory")->required();
    s_syn->add_option("--task", syn.task, "Labeled task name from the grammar (omit for an unlabeled corpus)");
    s_syn->add_option("--task-id", syn.task_id)->capture_default_str();
    s_syn->add_option("--test-fraction", syn.test_fraction, "Also write a stratified train/test split")
        ->check(CLI::Range(0.0, 0.99))
        ->capture_default_str();
    s_syn->add_option("--grammar", syn.grammar)->check(CLI::ExistingFile)->capture_default_str();

    PretrainOpts pre;
    auto* s_pre = app.add_subcommand("pretrain", "Two-stage self-supervised pre-training");
    s_pre->add_option("--corpus", pre.corpus, "One URL per line")->required()->check(CLI::ExistingFile);
    s_pre->add_option("--out", pre.out, "Output directory")->required();
    s_pre->add_option("--vocab", pre.vocab, "Existing vocab.json (default: learn one)")->check(CLI::ExistingFile);
    s_pre->add_option("--vocab-size", pre.vocab_size)->capture_default_str();
    s_pre->add_option("--stage", pre.stage)->check(CLI::IsMember({"all", "1", "2"}))->capture_default_str();
    s_pre->add_option("--init", pre.init, "Stage-1 checkpoint stem to continue from (with --stage 2)");
    s_pre->add_flag("--skip-stage1", pre.skip_stage1, "Start stage 2 from a fresh encoder");
    s_pre->add_option("--heldout", pre.heldout, "Held-out share for metrics")->check(CLI::Range(0.0, 0.5))->capture_default_str();
    s_pre->add_option("--eval-rows", pre.eval_rows, "Cap on held-out rows used for metrics")->capture_default_str();
    s_pre->add_option("--max-chars", pre.max_chars, "Drop URLs longer than this (0 = keep all)")->capture_default_str();
    s_pre->add_option("--layers", pre.enc.layers)->capture_default_str();
    s_pre->add_option("--heads", pre.enc.heads)->capture_default_str();
    s_pre->add_option("--hidden", pre.enc.hidden)->capture_default_str();
    s_pre->add_option("--ffn-mult", pre.enc.ffn_mult)->capture_default_str();
    s_pre->add_option("--max-len", pre.enc.max_len)->capture_default_str();
    s_pre->add_option("--dropout", pre.enc.dropout_p)->capture_default_str();
    s_pre->add_option("--stage1-epochs", pre.cfg.stage1_epochs)->capture_default_str();
    s_pre->add_option("--stage2-epochs", pre.cfg.stage2_epochs)->capture_default_str();
    s_pre->add_option("--stage1-max-steps", pre.cfg.stage1_max_steps, "0 = no cap")->capture_default_str();
    s_pre->add_option("--stage2-max-steps", pre.cfg.stage2_max_steps, "0 = no cap")->capture_default_str();
    s_pre->add_option("--batch-size", pre.cfg.batch_size)->capture_default_str();
    s_pre->add_option("--lr", pre.cfg.lr)->capture_default_str();
    s_pre->add_option("--warmup-fraction", pre.cfg.warmup_fraction)->capture_default_str();
    s_pre->add_option("--weight-decay", pre.cfg.weight_decay)->capture_default_str();
    s_pre->add_option("--shuffle-rate", pre.cfg.shuffle_rate)->capture_default_str();
    s_pre->add_option("--replace-rate", pre.cfg.replace_rate)->capture_default_str();
    s_pre->add_option("--mask-rate", pre.cfg.mask_rate)->capture_default_str();
    s_pre->add_option("--scl-dropout", pre.cfg.scl_dropout, "Dropout rate of the contrastive views")->capture_default_str();
    s_pre->add_option("--fgsm-alpha", pre.cfg.fgsm_alpha)->capture_default_str();
    s_pre->add_option("--tau", pre.cfg.tau, "Contrastive temperature")->capture_default_str();
    s_pre->add_option("--vat-sigma2", pre.cfg.vat.sigma2)->capture_default_str();
    s_pre->add_option("--vat-step", pre.cfg.vat.step)->capture_default_str();
    s_pre->add_option("--vat-epsilon", pre.cfg.vat.epsilon)->capture_default_str();
    s_pre->add_option("--vat-weight", pre.cfg.vat_weight)->capture_default_str();

    FinetuneOpts ft;
    auto* s_ft = app.add_subcommand("finetune", "Fine-tune one task head on a pre-trained checkpoint");
    s_ft->add_option("--checkpoint", ft.checkpoint, "Checkpoint stem (path without .json/.bin)")->required();
    s_ft->add_option("--task", ft.task, "Training TSV (url<TAB>label)")->required()->check(CLI::ExistingFile);
    s_ft->add_option("--test", ft.test, "Test TSV (default: split from --task)")->check(CLI::ExistingFile);
    s_ft->add_option("--task-name", ft.task_name)->capture_default_str();
    s_ft->add_option("--task-id", ft.task_id)->capture_default_str();
    s_ft->add_option("--head", ft.head, "cnn, cls_layer:K, last4_{concat,mean,max,min,weighted,attention}")->capture_default_str();
    s_ft->add_flag("--two-stage", ft.two_stage, "Train the head on a frozen encoder first");
    s_ft->add_option("--out", ft.out, "Output directory")->required();
    add_schedule(s_ft, ft.s);

    MultitaskOpts mt;
    auto* s_mt = app.add_subcommand("finetune-mt", "Fine-tune one shared encoder on several tasks");
    s_mt->add_option("--checkpoint", mt.checkpoint, "Checkpoint stem")->required();
    s_mt->add_option("--tasks", mt.tasks, "Training TSVs")->required()->delimiter(',')->check(CLI::ExistingFile);
    s_mt->add_option("--tests", mt.tests, "Test TSVs, one per task")->delimiter(',')->check(CLI::ExistingFile);
    s_mt->add_option("--names", mt.names, "Task names (default: file stems)")->delimiter(',');
    s_mt->add_option("--heads", mt.heads, "One head kind, or one per task")->delimiter(',')->capture_default_str();
    s_mt->add_option("--lr", mt.cfg.lr)->capture_default_str();
    s_mt->add_option("--epochs", mt.cfg.epochs)->capture_default_str();
    s_mt->add_option("--batch-size", mt.cfg.batch_size)->capture_default_str();
    s_mt->add_option("--weight-decay", mt.cfg.weight_decay)->capture_default_str();
    s_mt->add_option("--test-fraction", mt.test_fraction)->check(CLI::Range(0.01, 0.99))->capture_default_str();
    s_mt->add_option("--max-chars", mt.max_chars)->capture_default_str();
    s_mt->add_option("--out", mt.out, "Output directory")->required();

    FeatureOpts fe;
    auto* s_fe = app.add_subcommand("extract-features", "Pooled CLS features from a frozen encoder");
    s_fe->add_option("--checkpoint", fe.checkpoint, "Checkpoint stem")->required();
    s_fe->add_option("--data", fe.data, "Labeled TSV")->required()->check(CLI::ExistingFile);
    s_fe->add_option("--pool", fe.pool, "cls_layer:K or last4_{concat,mean,max,min} (default: final-layer CLS)");
    s_fe->add_option("--task-name", fe.task_name, "Use the pooling head of this fine-tuned task");
    s_fe->add_option("--batch-size", fe.batch_size)->capture_default_str();
    s_fe->add_option("--out", fe.out, "Output directory")->required();

    EvaluateOpts ev;
    auto* s_ev = app.add_subcommand("evaluate", "Metrics for a fine-tuned checkpoint or a feature classifier");
    s_ev->add_option("--checkpoint", ev.checkpoint, "Fine-tuned checkpoint stem");
    s_ev->add_option("--data", ev.data, "Labeled TSV")->check(CLI::ExistingFile);
    s_ev->add_option("--task-name", ev.task_name, "Task head to evaluate (default: the only one)");
    s_ev->add_option("--train-features", ev.train_features, "Feature stem for classifier training");
    s_ev->add_option("--test-features", ev.test_features, "Feature stem for classifier testing");
    s_ev->add_option("--classifier", ev.classifier)->check(CLI::IsMember({"knn", "lr", "gnb"}))->capture_default_str();
    s_ev->add_option("--k", ev.k, "Neighbours for knn")->capture_default_str();
    s_ev->add_option("--lr-rate", ev.logistic.lr)->capture_default_str();
    s_ev->add_option("--lr-epochs", ev.logistic.epochs)->capture_default_str();
    s_ev->add_option("--lr-l2", ev.logistic.l2)->capture_default_str();
    s_ev->add_option("--var-smoothing", ev.var_smoothing)->capture_default_str();
    s_ev->add_option("--out", ev.out, "Output directory")->required();

    AblateOpts ab;
    auto* s_ab = app.add_subcommand("ablate-pooling", "Fine-tune every layer/pooling variant and compare");
    s_ab->add_option("--checkpoint", ab.checkpoint, "Pre-trained checkpoint stem")->required();
    s_ab->add_option("--task", ab.task, "Training TSV")->required()->check(CLI::ExistingFile);
    s_ab->add_option("--test", ab.test, "Test TSV (default: split from --task)")->check(CLI::ExistingFile);
    s_ab->add_option("--task-name", ab.task_name)->capture_default_str();
    s_ab->add_option("--out", ab.out, "Output directory")->required();
    add_schedule(s_ab, ab.s);

    CorruptionOpts co;
    auto* s_co = app.add_subcommand("dump-corruption", "Write a per-token audit of corruption and masking");
    s_co->add_option("--corpus", co.corpus, "One URL per line")->required()->check(CLI::ExistingFile);
    s_co->add_option("--vocab", co.vocab, "vocab.json")->check(CLI::ExistingFile);
    s_co->add_option("--checkpoint", co.checkpoint, "Checkpoint stem (vocab and max_len from its manifest)");
    s_co->add_option("--n", co.n, "Sequences to dump")->capture_default_str();
    s_co->add_option("--max-len", co.max_len)->capture_default_str();
    s_co->add_option("--shuffle-rate", co.shuffle_rate)->capture_default_str();
    s_co->add_option("--replace-rate", co.replace_rate)->capture_default_str();
    s_co->add_option("--mask-rate", co.mask_rate)->capture_default_str();
    s_co->add_option("--out", co.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << "error: " << e.what() << "\n\n";
        const auto subs = app.get_subcommands();
        std::cerr << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    }

    auto precision = [&](auto&& f32, auto&& f64) { root.f64 ? f64() : f32(); };
    try {
        if (*s_tok) cmd_train_tokenizer(root, tok);
        if (*s_syn) cmd_synth_corpus(root, syn);
        if (*s_co) cmd_dump_corruption(root, co);
        if (*s_pre) precision([&] { cmd_pretrain<float>(root, pre); }, [&] { cmd_pretrain<double>(root, pre); });
        if (*s_ft) precision([&] { cmd_finetune<float>(root, ft); }, [&] { cmd_finetune<double>(root, ft); });
        if (*s_mt) precision([&] { cmd_finetune_mt<float>(root, mt); }, [&] { cmd_finetune_mt<double>(root, mt); });
        if (*s_fe)
            precision([&] { cmd_extract_features<float>(root, fe); }, [&] { cmd_extract_features<double>(root, fe); });
        if (*s_ev) precision([&] { cmd_evaluate<float>(root, ev); }, [&] { cmd_evaluate<double>(root, ev); });
        if (*s_ab)
            precision([&] { cmd_ablate_pooling<float>(root, ab); }, [&] { cmd_ablate_pooling<double>(root, ab); });
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
