// Acceptance suite: one PASS/FAIL line per criterion, details in
// <artifacts>/acceptance.json.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "urlbert/nn/grad_check.hpp"
#include "urlbert/urlbert.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace urlbert;
using D = Tensor<double>;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string summary;
    json detail = json::object();
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

D random_tensor(nn::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(nn::numel(shape));
    for (auto& x : v) x = n(rng);
    return D(std::move(shape), std::move(v));
}

Batch toy_batch(std::mt19937_64& rng, std::size_t rows, std::size_t len, int max_id, bool full_first = true) {
    Batch b;
    b.rows = rows;
    b.len = len;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto tl = r == 0 && full_first ? len : std::uniform_int_distribution<std::size_t>(1, len)(rng);
        b.true_len.push_back(tl);
        for (std::size_t p = 0; p < len; ++p) {
            b.ids.push_back(p == 0 ? special::cls
                                   : p < tl ? std::uniform_int_distribution<int>(special::count, max_id)(rng)
                                            : special::pad);
            b.mask.push_back(p < tl);
        }
    }
    return b;
}

// ------------------------------------------------------------------ 1

Outcome gradient_suite() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    json checks = json::array();
    bool ok = true;
    double worst = 0;
    std::size_t total = 0;
    auto run = [&](const std::string& name, const std::function<D()>& f, std::vector<std::pair<std::string, D>> in) {
        const auto r = nn::grad_check(f, std::move(in));
        ok &= r.ok() && r.checked > 0;
        worst = std::max(worst, r.max_rel_err);
        total += r.checked;
        checks.push_back({{"name", name}, {"checked", r.checked}, {"max_rel_err", r.max_rel_err}, {"ok", r.ok()}});
    };

    // Raw ops.
    {
        auto q = random_tensor({2, 5, 4}, rng), k = random_tensor({2, 5, 4}, rng), v = random_tensor({2, 5, 4}, rng);
        const std::vector<double> mask{1, 1, 1, 1, 0, 1, 1, 0, 0, 0};
        const auto w = random_tensor({2, 5, 4}, rng);
        run("attention", [&] { return nn::sum_all(nn::mul(nn::attention(q, k, v, std::span<const double>(mask), 2), w)); },
            {{"q", q}, {"k", k}, {"v", v}});
        auto x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
        const auto w2 = random_tensor({3, 6}, rng);
        run("layer_norm", [&] { return nn::sum_all(nn::mul(nn::layer_norm(x, g, b), w2)); },
            {{"x", x}, {"g", g}, {"b", b}});
    }

    // Encoder with pre-training heads, perturbed so every path carries signal.
    EncoderConfig enc;
    enc.layers = 2;
    enc.heads = 2;
    enc.hidden = 8;
    enc.ffn_mult = 2;
    enc.max_len = 7;
    enc.vocab_size = 24;
    ParamStore<double> ps;
    init_encoder(ps, enc, 5);
    init_pretrain_heads(ps, enc, 6);
    for (auto& [_, p] : ps.items())
        for (auto& v : p.mutable_data()) v += std::normal_distribution<double>(0.0, 0.3)(rng);
    const auto batch = toy_batch(rng, 3, 7, int(enc.vocab_size) - 1);
    auto emb = embed(ps, enc, batch).detach();
    std::vector<std::string> block_params;
    for (const auto& [name, _] : ps.items())
        if (name.starts_with("layer")) block_params.push_back(name);
    auto with_params = [&](std::vector<std::pair<std::string, D>> in, const std::vector<std::string>& names) {
        for (const auto& n : names) in.emplace_back(n, ps.at(n));
        return in;
    };
    {
        const auto w = random_tensor({batch.rows, batch.len, enc.hidden}, rng);
        run("encoder block", [&] { return nn::sum_all(nn::mul(encode_from_embeddings(ps, enc, emb, batch).final(), w)); },
            with_params({{"emb", emb}}, block_params));
        run("embedding path", [&] { return nn::sum_all(nn::mul(encode(ps, enc, batch).final(), w)); },
            with_params({}, {"embed.token", "embed.pos", "embed.ln.g", "embed.ln.b"}));
    }

    // Heads.
    {
        const std::size_t b = 2, l = 6, hid = 4;
        ParamStore<double> hp;
        init_head(hp, "c.", HeadSpec{HeadKind::cnn, 0, 3, 5, 3}, hid, 2);
        for (auto& v : hp.at("c.out").mutable_data()) v *= 50;
        for (auto& v : hp.at("c.conv").mutable_data()) v *= 50;
        const std::vector<double> mask{1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1};
        auto states = random_tensor({b, l, hid}, rng);
        const auto w = random_tensor({b, 3}, rng);
        run("cnn head",
            [&] { return nn::sum_all(nn::mul(cnn_head_forward(hp, "c.", states, std::span<const double>(mask)), w)); },
            {{"states", states}, {"conv", hp.at("c.conv")}, {"conv.bias", hp.at("c.conv.bias")}, {"out", hp.at("c.out")}});
        HiddenStack<double> stack;
        for (int i = 0; i <= 4; ++i) stack.states.push_back(random_tensor({b, 3, hid}, rng));
        for (auto kind : {HeadKind::last4_weighted, HeadKind::last4_attention, HeadKind::last4_max}) {
            const HeadSpec spec{kind, 0, 2};
            ParamStore<double> pp;
            init_head(pp, "h.", spec, hid, 3);
            for (auto& [_, p] : pp.items())
                for (auto& v : p.mutable_data()) v += std::normal_distribution<double>(0.0, 0.5)(rng);
            const auto w2 = random_tensor({b, 2}, rng);
            std::vector<std::pair<std::string, D>> in;
            for (std::size_t k = 1; k <= 4; ++k) in.emplace_back("layer" + std::to_string(k), stack.states[k]);
            for (auto& [n, p] : pp.items()) in.emplace_back(n, p);
            run("pooling " + spec.name(), [&] { return nn::sum_all(nn::mul(linear(pp, "h.out", pool(pp, "h.", stack, spec)), w2)); },
                in);
        }
    }

    // Losses.
    {
        auto logits3 = random_tensor({2, 4, 3}, rng);
        const std::vector<int> labels{-1, 0, 1, 2, -1, 2, 2, 1};
        run("loss rstd", [&] { return loss_rstd(logits3, labels).value; }, {{"logits", logits3}});
        std::vector<std::size_t> positions{1, 3, 9, 16};
        std::vector<int> targets;
        for (auto p : positions) targets.push_back(batch.ids[p]);
        run("loss mlm (tied head)",
            [&] { return loss_mlm(mlm_logits(ps, encode_from_embeddings(ps, enc, emb, batch).final(), positions), targets).value; },
            with_params({{"emb", emb}}, {"mlm.dense", "mlm.dense.bias", "mlm.ln.g", "mlm.ln.b", "mlm.bias", "embed.token"}));
        auto reps = random_tensor({6, 4}, rng);
        run("loss nt_xent", [&] { return nt_xent(reps, 0.3).value; }, {{"reps", reps}});
        auto pl = random_tensor({3, 5}, rng), ql = random_tensor({3, 5}, rng);
        run("loss kl", [&] { return kl_div(nn::softmax(pl), nn::softmax(ql)).value; }, {{"p", pl}, {"q", ql}});
        auto cls = random_tensor({4, 3}, rng);
        const std::vector<int> cl{0, 1, 2, 1};
        run("loss cls", [&] { return loss_cls(cls, cl).value; }, {{"cls", cls}});
        auto lv = random_tensor({5, 9}, rng);
        const std::vector<int> tv{3, -1, 8, 0, -1};
        run("stage-2 total",
            [&] { return stage2_loss(nt_xent(reps, 0.3), loss_mlm(lv, tv), kl_div(nn::softmax(pl), nn::softmax(ql))).value; },
            {{"reps", reps}, {"mlm", lv}, {"p", pl}});
    }

    // Adversarial composites through the encoder.
    {
        std::vector<double> g(emb.size());
        for (auto& v : g) v = std::normal_distribution<double>()(rng);
        run("fgsm contrastive composite",
            [&] {
                auto a = fgsm_step(dropout_augment(emb, 0.1, 11), std::span<const double>(g), 0.05);
                auto b = fgsm_step(dropout_augment(emb, 0.1, 12), std::span<const double>(g), 0.05);
                const auto st = encode_from_embeddings(ps, enc, interleave_views(a, b), duplicate_rows(batch));
                return nt_xent(cls_vector(st, enc.layers), 0.5).value;
            },
            with_params({{"emb", emb}}, block_params));

        std::vector<std::size_t> positions{1, 2, 4, 8};
        auto forward = [&](const D& d, bool) {
            return nn::softmax(mlm_logits(ps, encode_from_embeddings(ps, enc, nn::add(emb, d), batch).final(), positions));
        };
        D target;
        {
            nn::NoGradGuard ng;
            target = forward(D::zeros(emb.shape()), false).detach();
        }
        const auto mask = batch.mask_as<double>();
        const auto res = vat_perturb<double>(forward, target, emb.shape(), std::span<const double>(mask), ps,
                                             VatConfig{}, 99);
        const D delta(emb.shape(), res.delta);
        run("vat composite", [&] { return kl_div(forward(delta, false), target).value; },
            with_params({{"emb", emb}}, {"layer1.attn.q", "layer0.ffn.w1", "mlm.dense", "embed.token"}));
    }

    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = ok && secs <= 120;
    o.summary = std::to_string(checks.size()) + " checks, " + std::to_string(total) + " elements, max rel err " +
                fmt(worst, 3) + " (limit 1e-5), " + fmt(secs, 3) + " s (limit 120 s)";
    o.detail = {{"checks", checks}, {"max_rel_err", worst}, {"seconds", secs}};
    return o;
}

// ------------------------------------------------------------------ 2

double brute_nt_xent(const D& r, double tau) {
    const std::size_t m = r.dim(0), d = r.dim(1);
    auto at = [&](std::size_t i, std::size_t k) { return r.data()[i * d + k]; };
    auto cosine = [&](std::size_t a, std::size_t b) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t k = 0; k < d; ++k) {
            dot += at(a, k) * at(b, k);
            na += at(a, k) * at(a, k);
            nb += at(b, k) * at(b, k);
        }
        return dot / std::sqrt(na * nb);
    };
    double total = 0;
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = i % 2 == 0 ? i + 1 : i - 1;
        double den = 0;
        for (std::size_t k = 0; k < m; ++k)
            if (k != i) den += std::exp(cosine(i, k) / tau);
        total += -std::log(std::exp(cosine(i, j) / tau) / den);
    }
    return total / double(m);
}

Outcome loss_oracles() {
    const auto t0 = Clock::now();
    std::mt19937_64 rng(7);
    double nt_err = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + trial % 12, d = 2 + trial % 6;
        const double tau = 0.05 + 0.1 * (trial % 10);
        const auto r = random_tensor({2 * n, d}, rng);
        nt_err = std::max(nt_err, std::abs(nt_xent(r, tau).scalar() - brute_nt_xent(r, tau)));
    }
    double kl_self = 0, kl_min = INFINITY;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t c = 2 + trial % 9;
        const auto a = nn::softmax(random_tensor({1, c}, rng, 3.0)), b = nn::softmax(random_tensor({1, c}, rng, 3.0));
        kl_self = std::max(kl_self, std::abs(kl_div(a, a).scalar()));
        kl_min = std::min(kl_min, kl_div(a, b).scalar());
    }
    std::vector<int> labels(24);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 4 == 0 ? -1 : int(i % 3);
    const double rstd_err = std::abs(loss_rstd(D::zeros({2, 12, 3}), labels).scalar() - std::log(3.0));
    double auc_err = 0;
    for (std::size_t n : {2u, 10u, 57u, 300u, 1000u}) {
        std::vector<double> s(n);
        std::vector<int> pos(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = double(std::uniform_int_distribution<int>(0, int(n / 3 + 1))(rng));
            pos[i] = int(i % 3 == 0);
        }
        double wins = 0, pairs = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (pos[i] && !pos[j]) {
                    wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
                    pairs += 1;
                }
        auc_err = std::max(auc_err, std::abs(roc_auc(s, pos) - wins / pairs));
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = nt_err <= 1e-10 && kl_self == 0.0 && kl_min >= 0.0 && rstd_err <= 1e-9 && auc_err <= 1e-12 && secs <= 60;
    o.summary = "nt_xent vs brute force " + fmt(nt_err, 3) + ", kl(p,p) max " + fmt(kl_self, 3) + ", kl min " +
                fmt(kl_min, 3) + ", rstd(uniform) - ln3 " + fmt(rstd_err, 3) + ", auc vs all-pairs " + fmt(auc_err, 3) +
                ", " + fmt(secs, 3) + " s";
    o.detail = {{"nt_xent_err", nt_err}, {"kl_self", kl_self}, {"kl_min", kl_min}, {"rstd_err", rstd_err},
                {"auc_err", auc_err}, {"seconds", secs}};
    return o;
}

// ------------------------------------------------------------------ 3

Outcome corruption_invariants() {
    const std::size_t vocab = 40;
    std::mt19937_64 rng(12);
    std::size_t violations = 0, batches = 0;
    for (int trial = 0; trial < 1000; ++trial, ++batches) {
        const int max_id = trial % 2 ? special::count + 2 : int(vocab) - 1;
        const auto b = toy_batch(rng, 4, 24, max_id, false);
        const bool identity = trial % 10 == 0;
        const double rs = identity ? 0.0 : 0.05 + 0.1 * (trial % 4);
        const double rr = identity ? 0.0 : 0.05 + 0.05 * (trial % 3);
        const auto c = corrupt_rstd(b, rs, rr, vocab, rng());
        if (identity && c.corrupted_ids != b.ids) ++violations;
        for (std::size_t r = 0; r < b.rows; ++r) {
            const std::size_t n = b.true_len[r] - 1;
            std::size_t shu = 0, rep = 0;
            for (std::size_t p = 0; p < b.len; ++p) {
                const auto i = r * b.len + p;
                const int lab = c.labels[i];
                if (p == 0 || p >= b.true_len[r]) {
                    violations += lab != rstd_label::ignore || c.corrupted_ids[i] != b.ids[i];
                    continue;
                }
                violations += identity && lab != rstd_label::original;
                shu += lab == rstd_label::shuffled;
                rep += lab == rstd_label::replaced;
            }
            const auto ks = shuffle_count(rs, n);
            violations += shu != ks || rep != replace_count(rr, n, ks);
        }
    }
    std::size_t sel = 0, masked = 0, random = 0, same = 0;
    while (sel < 10000) {
        const auto b = toy_batch(rng, 8, 64, 5000, false);
        const auto mm = mask_mlm(b, 0.15, 100000, rng());
        for (std::size_t i = 0; i < b.ids.size(); ++i) {
            if (mm.targets[i] < 0) continue;
            ++sel;
            if (mm.masked_ids[i] == special::mask)
                ++masked;
            else if (mm.masked_ids[i] == b.ids[i])
                ++same;
            else
                ++random;
        }
    }
    const double fm = double(masked) / double(sel), fr = double(random) / double(sel), fs = double(same) / double(sel);
    Outcome o;
    o.pass = violations == 0 && std::abs(fm - 0.8) <= 0.03 && std::abs(fr - 0.1) <= 0.03 && std::abs(fs - 0.1) <= 0.03;
    o.summary = std::to_string(batches) + " batches, " + std::to_string(violations) + " violations; mask split " +
                fmt(fm, 3) + "/" + fmt(fr, 3) + "/" + fmt(fs, 3) + " over " + std::to_string(sel) + " selections";
    o.detail = {{"batches", batches}, {"violations", violations}, {"selections", sel},
                {"mask", fm}, {"random", fr}, {"same", fs}};
    return o;
}

// ------------------------------------------------------------------ 4-8 shared desk run

struct Desk {
    EncoderConfig enc;
    Vocab vocab;
    PretrainConfig cfg;
    std::vector<TokenSeq> data, held;
    PretrainResult<float> res;
    ParamStore<float> stage1_params;
    RstdEval stage1_eval;
    double gap = 0;
    double stage1_seconds = 0, stage2_seconds = 0;
};

std::unique_ptr<Desk> run_desk(const fs::path& dir) {
    auto d = std::make_unique<Desk>();
    const auto g = load_grammar(URLBERT_DEFAULT_GRAMMAR);
    const auto corpus = synth_corpus(50000, 1, g);
    const auto held = synth_corpus(2000, derive_seed(1, {99}), g);
    d->vocab = train_vocab(corpus, 1024);
    d->enc.vocab_size = d->vocab.size();
    d->data = tokenize_all(d->vocab, corpus, d->enc.max_len);
    d->held = tokenize_all(d->vocab, held, d->enc.max_len);
    d->cfg.stage1_epochs = 1;
    d->cfg.stage2_max_steps = 300;
    const auto t0 = Clock::now();
    auto t_stage = t0;
    d->res = pretrain_all<float>(d->cfg, d->enc, d->vocab, d->data, dir / "pretrain", {},
                                 [&](int stage, const ParamStore<float>& params) {
                                     if (stage == 1) {
                                         d->stage1_seconds = seconds_since(t0);
                                         d->stage1_params = params.clone();
                                         d->stage1_eval = evaluate_rstd(params, d->enc, d->held, d->cfg, 4242);
                                         t_stage = Clock::now();
                                     } else {
                                         d->stage2_seconds = seconds_since(t_stage);
                                         d->gap = alignment_gap(params, d->enc, std::span(d->held).first(256),
                                                                d->cfg.scl_dropout, 4343);
                                     }
                                 });
    return d;
}

Outcome stage1_learning(const Desk& d) {
    const double ratio = d.stage1_eval.loss / std::log(3.0);
    Outcome o;
    o.pass = ratio <= 0.55 && d.stage1_eval.auc >= 0.75 && d.stage1_seconds <= 1800;
    o.summary = "held-out loss " + fmt(ratio, 3) + " x ln3 (limit 0.55), AUC " + fmt(d.stage1_eval.auc, 3) +
                " (limit 0.75), " + std::to_string(d.res.log.stage("stage1").size()) + " steps / 1 epoch, " +
                fmt(d.stage1_seconds, 4) + " s";
    o.detail = {{"heldout_loss", d.stage1_eval.loss}, {"loss_over_ln3", ratio}, {"auc", d.stage1_eval.auc},
                {"tokens", d.stage1_eval.tokens}, {"seconds", d.stage1_seconds}};
    return o;
}

Outcome stage2_quality(const Desk& d) {
    auto ps = d.res.params.clone();
    const auto& enc = d.enc;
    int wins = 0;
    std::span<const TokenSeq> hs(d.held);
    for (int t = 0; t < 100; ++t) {
        auto batch = make_batch(hs.subspan(std::size_t(t) * 8, 8));
        const auto mm = mask_mlm(batch, d.cfg.mask_rate, enc.vocab_size, derive_seed(77, {std::uint64_t(t)}));
        batch.ids = mm.masked_ids;
        std::vector<std::size_t> pos;
        for (std::size_t i = 0; i < mm.targets.size(); ++i)
            if (mm.targets[i] >= 0) pos.push_back(i);
        const auto emb = embed(ps, enc, batch).detach();
        auto forward = [&](const Tensor<float>& delta, bool) {
            return nn::softmax(mlm_logits(ps, encode_from_embeddings(ps, enc, nn::add(emb, delta), batch).final(),
                                          std::span<const std::size_t>(pos)));
        };
        Tensor<float> target;
        {
            nn::NoGradGuard ng;
            target = forward(Tensor<float>::zeros(emb.shape()), false);
        }
        const auto mask = batch.mask_as<float>();
        const auto res = vat_perturb<float>(forward, target, emb.shape(), std::span<const float>(mask), ps, d.cfg.vat,
                                            derive_seed(78, {std::uint64_t(t)}));
        std::mt19937_64 rng(derive_seed(79, {std::uint64_t(t)}));
        std::normal_distribution<double> n;
        std::vector<float> r(res.delta.size());
        const std::size_t per = r.size() / batch.rows;
        for (std::size_t i = 0; i < r.size(); ++i) r[i] = mask[i / enc.hidden] != 0 ? float(n(rng)) : 0.0f;
        for (std::size_t b = 0; b < batch.rows; ++b) {
            double sr = 0, sd = 0;
            for (std::size_t i = 0; i < per; ++i) {
                sr += double(r[b * per + i]) * r[b * per + i];
                sd += double(res.delta[b * per + i]) * res.delta[b * per + i];
            }
            for (std::size_t i = 0; i < per; ++i) r[b * per + i] *= float(std::sqrt(sd / sr));
        }
        nn::NoGradGuard ng;
        const double kl_random = kl_div(forward(Tensor<float>(emb.shape(), r), false), target).scalar();
        wins += res.loss.scalar() >= kl_random;
    }
    Outcome o;
    o.pass = d.gap >= 0.2 && wins >= 90 && d.stage2_seconds <= 1800;
    o.summary = "alignment gap " + fmt(d.gap, 3) + " (limit 0.2), VAT wins " + std::to_string(wins) +
                "/100 (limit 90), " + std::to_string(d.res.log.stage("stage2").size()) + " steps, " +
                fmt(d.stage2_seconds, 4) + " s";
    o.detail = {{"alignment_gap", d.gap}, {"vat_wins", wins}, {"seconds", d.stage2_seconds}};
    return o;
}

Outcome grouped_handoff(const Desk& d, const fs::path& dir) {
    const auto s1 = nn::load_checkpoint<float>(dir / "pretrain" / "stage1");
    const auto s2 = nn::read_manifest(dir / "pretrain" / "stage2");
    const auto lineage = s2.at("metadata").at("lineage");
    const auto s1_sum = s1.manifest.at("checksum").get<std::string>();
    bool same_bytes = s1.params.size() == d.stage1_params.size();
    for (const auto& [name, p] : d.stage1_params.items())
        same_bytes &= s1.params.contains(name) && s1.params.at(name).values() == p.values();
    Outcome o;
    o.pass = same_bytes && d.res.stage2_initial_checksum == s1_sum && lineage.at("parent") == s1_sum &&
             lineage.at("initial_checksum") == s1_sum && s2.at("checksum") != s1_sum;
    o.summary = "stage-1 final " + s1_sum + ", stage-2 initial " + d.res.stage2_initial_checksum +
                ", manifest parent " + lineage.at("parent").get<std::string>() + ", reload bytes " +
                (same_bytes ? "identical" : "differ");
    o.detail = {{"stage1", s1_sum}, {"stage2_initial", d.res.stage2_initial_checksum}, {"lineage", lineage},
                {"stage2", s2.at("checksum")}};
    return o;
}

struct TaskSplit {
    LabeledTokens train, test;
};

TaskSplit synth_task(const Desk& d, const std::string& name, int id, std::size_t n_train, std::size_t n_test,
                     std::uint64_t seed) {
    const auto g = load_grammar(URLBERT_DEFAULT_GRAMMAR);
    const auto all = synth_labeled(n_train + n_test, seed, g, name, id);
    const std::vector<UrlRecord> train(all.begin(), all.begin() + std::ptrdiff_t(n_train));
    const std::vector<UrlRecord> test(all.begin() + std::ptrdiff_t(n_train), all.end());
    return {tokenize_labeled(d.vocab, train, d.enc.max_len), tokenize_labeled(d.vocab, test, d.enc.max_len)};
}

Outcome two_stage(const Desk& d) {
    const auto t0 = Clock::now();
    const auto task = synth_task(d, "phishing", 0, 5000, 1000, 501);
    auto params = d.res.params.clone();
    strip_pretrain_heads(params);
    const auto res =
        finetune_two_stage(params, d.enc, TaskSpec{"phishing", 0, parse_head("cnn", 2)}, task.train, task.test, {});
    const double secs = seconds_since(t0);
    Outcome o;
    const bool frozen = res.encoder_before_a == res.encoder_after_a;
    o.pass = frozen && res.final_metrics.accuracy >= 0.95 && secs <= 600;
    o.summary = std::string("encoder ") + (frozen ? "unchanged" : "CHANGED") + " through stage A (" +
                nn::hex64(res.encoder_after_a) + "), accuracy after A " +
                fmt(res.after_stage_a ? res.after_stage_a->accuracy : NAN, 3) + ", final " +
                fmt(res.final_metrics.accuracy, 4) + " (limit 0.95), " + fmt(secs, 4) + " s";
    o.detail = {{"encoder_before", nn::hex64(res.encoder_before_a)}, {"encoder_after", nn::hex64(res.encoder_after_a)},
                {"after_stage_a", res.after_stage_a ? res.after_stage_a->to_json() : json(nullptr)},
                {"final", res.final_metrics.to_json()}, {"seconds", secs}};
    return o;
}

Outcome multitask_parity(const Desk& d) {
    const auto t0 = Clock::now();
    const std::vector<std::string> names{"phishing", "advertising", "topic"};
    std::vector<TaskData> tasks;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto g = load_grammar(URLBERT_DEFAULT_GRAMMAR);
        auto split = synth_task(d, names[i], int(i), 3000, 1000, 601 + i);
        tasks.push_back({{names[i], int(i), parse_head("cnn", g.task(names[i]).families.size())},
                         std::move(split.train), std::move(split.test)});
    }
    auto base = d.res.params.clone();
    strip_pretrain_heads(base);
    auto mt_params = base.clone();
    const auto mt = finetune_multitask(mt_params, d.enc, tasks, {});
    bool ok = true;
    json rows = json::array();
    std::string summary;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto params = base.clone();
        const auto single = finetune_two_stage(params, d.enc, tasks[i].spec, tasks[i].train, tasks[i].test, {});
        const double diff = mt.metrics[i].accuracy - single.final_metrics.accuracy;
        ok &= std::abs(diff) <= 0.02;
        rows.push_back({{"task", names[i]}, {"multitask", mt.metrics[i].accuracy},
                        {"single", single.final_metrics.accuracy}, {"diff", diff}});
        summary += names[i] + " " + fmt(mt.metrics[i].accuracy, 4) + " vs " + fmt(single.final_metrics.accuracy, 4) + ", ";
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = ok && secs <= 1200;
    o.summary = summary + "limit 0.02 apart, " + fmt(secs, 4) + " s";
    o.detail = {{"tasks", rows}, {"seconds", secs}};
    return o;
}

// ------------------------------------------------------------------ 9

int run_lab(const std::string& lab, const std::string& args, const fs::path& log) {
    const auto cmd = "\"" + lab + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome pooling_ablation(const std::string& lab, const fs::path& dir) {
    const auto t0 = Clock::now();
    fs::create_directories(dir);
    const auto q = [](const fs::path& p) { return "\"" + p.string() + "\""; };
    const std::vector<std::string> steps{
        "synth-corpus --n 6000 --seed 5 --out " + q(dir / "corpus"),
        "pretrain --seed 5 --corpus " + q(dir / "corpus" / "corpus.txt") +
            " --layers 4 --heads 4 --hidden 64 --max-len 48 --vocab-size 512 --batch-size 32"
            " --stage1-max-steps 150 --stage2-max-steps 20 --out " + q(dir / "pretrain"),
        "synth-corpus --n 1200 --seed 6 --task phishing --test-fraction 0.25 --out " + q(dir / "task"),
        "ablate-pooling --seed 7 --checkpoint " + q(dir / "pretrain" / "stage2") + " --task " +
            q(dir / "task" / "phishing.train.tsv") + " --test " + q(dir / "task" / "phishing.test.tsv") +
            " --stage-a-epochs 1 --stage-b-epochs 1 --out " + q(dir / "ablation")};
    Outcome o;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const int rc = run_lab(lab, steps[i], dir / ("step" + std::to_string(i) + ".log"));
        if (rc != 0) {
            o.summary = "urlbert-lab exited " + std::to_string(rc) + " on: " + steps[i];
            return o;
        }
    }
    std::ifstream csv(dir / "ablation" / "ablation.csv");
    std::vector<std::string> lines;
    for (std::string line; std::getline(csv, line);) lines.push_back(line);
    const std::vector<std::string> expected{"cls_layer:1", "cls_layer:2", "cls_layer:3", "cls_layer:4",
                                            "last4_concat", "last4_mean", "last4_max", "last4_min",
                                            "last4_weighted", "last4_attention"};
    bool rows_ok = lines.size() == expected.size() + 1 && lines[0] == "config,accuracy,precision,recall,f1,auc";
    for (std::size_t i = 0; rows_ok && i < expected.size(); ++i) {
        rows_ok &= lines[i + 1].starts_with(expected[i] + ",");
        rows_ok &= std::count(lines[i + 1].begin(), lines[i + 1].end(), ',') == 5 && lines[i + 1].back() != ',';
    }
    std::ifstream mj(dir / "ablation" / "metrics.json");
    const auto metrics = json::parse(mj);
    for (const auto& r : metrics.at("rows"))
        for (const char* k : {"accuracy", "precision", "recall", "f1", "auc"}) rows_ok &= r.at("test").at(k).is_number();

    // identical layer inputs collapse every reduction to that input
    std::mt19937_64 rng(31);
    HiddenStack<double> same;
    same.states.push_back(random_tensor({3, 5, 6}, rng));
    const auto layer = random_tensor({3, 5, 6}, rng);
    for (int k = 0; k < 4; ++k) same.states.push_back(layer);
    double worst = 0;
    for (auto kind : {HeadKind::last4_mean, HeadKind::last4_max, HeadKind::last4_min, HeadKind::last4_weighted,
                      HeadKind::last4_attention}) {
        const HeadSpec spec{kind, 0, 2};
        ParamStore<double> ps;
        init_head(ps, "p.", spec, 6, 3);
        for (auto& [_, p] : ps.items())
            for (auto& v : p.mutable_data()) v += std::normal_distribution<double>(0.0, 1.0)(rng);
        const auto out = pool(ps, "p.", same, spec);
        const auto ref = cls_vector(same, 4);
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(out.data()[i] - ref.data()[i]));
    }
    const double secs = seconds_since(t0);
    o.pass = rows_ok && worst <= 1e-12;
    o.summary = std::to_string(lines.empty() ? 0 : lines.size() - 1) + " configurations with full metrics" +
                (rows_ok ? "" : " (MALFORMED)") + ", degenerate pooling max deviation " + fmt(worst, 3) + ", " +
                fmt(secs, 4) + " s";
    o.detail = {{"csv", lines}, {"degenerate_max_dev", worst}, {"seconds", secs}};
    return o;
}

// ------------------------------------------------------------------ 10

struct MiniRun {
    std::vector<std::pair<std::string, std::map<std::string, double>>> pretrain, finetune, multitask;
    std::string stage1, stage2;
    double eval_loss = 0, gap = 0;
    std::vector<double> ft_metrics, mt_metrics;

    bool operator==(const MiniRun&) const = default;
};

MiniRun mini_pipeline(const fs::path& dir) {
    const auto g = load_grammar(URLBERT_DEFAULT_GRAMMAR);
    const auto corpus = synth_corpus(800, 3, g);
    const auto vocab = train_vocab(corpus, 200);
    EncoderConfig enc;
    enc.layers = 2;
    enc.heads = 2;
    enc.hidden = 16;
    enc.ffn_mult = 2;
    enc.max_len = 32;
    enc.vocab_size = vocab.size();
    PretrainConfig cfg;
    cfg.batch_size = 16;
    cfg.stage1_max_steps = 15;
    cfg.stage2_max_steps = 4;
    const auto data = tokenize_all(vocab, corpus, enc.max_len);
    MiniRun m;
    auto res = pretrain_all<double>(cfg, enc, vocab, data, dir, {}, [&](int stage, const ParamStore<double>& p) {
        if (stage == 1) m.eval_loss = evaluate_rstd(p, enc, std::span(data).first(64), cfg, 5).loss;
        if (stage == 2) m.gap = alignment_gap(p, enc, std::span(data).first(32), 0.1, 6);
    });
    m.pretrain = res.log.losses();
    m.stage1 = res.stage1_checksum;
    m.stage2 = res.stage2_manifest.at("checksum");
    strip_pretrain_heads(res.params);

    std::vector<TaskData> tasks;
    const std::vector<std::string> names{"phishing", "advertising", "topic"}, heads{"cnn", "cls_layer:2", "cnn"};
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto recs = synth_labeled(150, 20 + i, g, names[i], int(i));
        const std::vector<UrlRecord> tr(recs.begin(), recs.begin() + 100), te(recs.begin() + 100, recs.end());
        tasks.push_back({{names[i], int(i), parse_head(heads[i], g.task(names[i]).families.size())},
                         tokenize_labeled(vocab, tr, enc.max_len), tokenize_labeled(vocab, te, enc.max_len)});
    }

    auto ft_params = res.params.clone();
    FinetuneSchedule sched;
    sched.stage_a_epochs = 1;
    sched.stage_b_epochs = 1;
    sched.max_steps_per_stage = 12;
    const auto ft = finetune_two_stage(ft_params, enc, tasks[0].spec, tasks[0].train, tasks[0].test, sched);
    m.finetune = ft.log.losses();
    m.ft_metrics = {ft.final_metrics.accuracy, ft.final_metrics.f1, ft.final_metrics.auc.value_or(-1)};

    auto mt_params = res.params.clone();
    MultitaskConfig mc;
    mc.epochs = 1;
    const auto mt = finetune_multitask(mt_params, enc, tasks, mc);
    m.multitask = mt.log.losses();
    for (const auto& x : mt.metrics) m.mt_metrics.push_back(x.accuracy);
    return m;
}

Outcome determinism(const fs::path& dir) {
    const auto t0 = Clock::now();
    const auto a = mini_pipeline(dir / "run_a");
    const auto b = mini_pipeline(dir / "run_b");
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = a == b && !a.pretrain.empty() && !a.finetune.empty() && !a.multitask.empty();
    o.summary = std::string("64-bit runs ") + (a == b ? "identical" : "DIFFER") + ": " +
                std::to_string(a.pretrain.size()) + " pre-training, " + std::to_string(a.finetune.size()) +
                " two-stage and " + std::to_string(a.multitask.size()) + " multi-task loss records, checksums " +
                a.stage2 + "/" + b.stage2 + ", " + fmt(secs, 3) + " s";
    o.detail = {{"stage2_a", a.stage2}, {"stage2_b", b.stage2}, {"records", a.pretrain.size() + a.finetune.size() + a.multitask.size()}};
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string artifacts = "acceptance_artifacts", lab = URLBERT_LAB_PATH;
    std::vector<int> only;
    app.add_option("--artifacts", artifacts, "Directory for checkpoints, logs and acceptance.json")->capture_default_str();
    app.add_option("--lab", lab, "urlbert-lab binary")->capture_default_str();
    app.add_option("--only", only, "Run only these criteria")->delimiter(',')->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);

    const fs::path dir = artifacts;
    fs::create_directories(dir);
    auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
    std::unique_ptr<Desk> desk;
    std::string desk_error;
    auto need_desk = [&]() -> const Desk* {
        if (!desk && desk_error.empty()) {
            try {
                desk = run_desk(dir);
            } catch (const std::exception& e) {
                desk_error = e.what();
            }
        }
        return desk.get();
    };

    const std::vector<std::pair<int, std::string>> names{
        {1, "gradient suite"},       {2, "loss oracles"},       {3, "corruption invariants"},
        {4, "stage-1 learning"},     {5, "stage-2 quality"},    {6, "grouped handoff"},
        {7, "two-stage fine-tuning"}, {8, "multi-task parity"}, {9, "pooling ablation"},
        {10, "determinism"}};
    json report = json::object();
    int failed = 0;
    for (const auto& [id, name] : names) {
        if (!wanted(id)) continue;
        Outcome o;
        try {
            switch (id) {
                case 1: o = gradient_suite(); break;
                case 2: o = loss_oracles(); break;
                case 3: o = corruption_invariants(); break;
                case 9: o = pooling_ablation(lab, dir / "ablation"); break;
                case 10: o = determinism(dir / "determinism"); break;
                default: {
                    const Desk* d = need_desk();
                    if (!d) throw std::runtime_error("desk pre-training failed: " + desk_error);
                    if (id == 4) o = stage1_learning(*d);
                    if (id == 5) o = stage2_quality(*d);
                    if (id == 6) o = grouped_handoff(*d, dir);
                    if (id == 7) o = two_stage(*d);
                    if (id == 8) o = multitask_parity(*d);
                }
            }
        } catch (const std::exception& e) {
            o.pass = false;
            o.summary = std::string("error: ") + e.what();
        }
        failed += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << o.summary << std::endl;
        report[std::to_string(id)] = {{"name", name}, {"pass", o.pass}, {"summary", o.summary}, {"detail", o.detail}};
        std::ofstream(dir / "acceptance.json") << report.dump(2) << '\n';
    }
    return failed == 0 ? 0 : 1;
}
