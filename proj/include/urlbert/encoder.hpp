// BERT-style post-LN transformer encoder over ParamStore tensors.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "urlbert/nn/ops.hpp"
#include "urlbert/nn/param_store.hpp"
#include "urlbert/tokenizer.hpp"

namespace urlbert {

using nn::ParamStore;
using nn::Shape;
using nn::Tensor;

struct EncoderConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t hidden = 128;
    std::size_t ffn_mult = 4;
    std::size_t max_len = 64;
    std::size_t vocab_size = 1024;
    double dropout_p = 0.1;

    void validate() const {
        if (layers == 0) throw std::invalid_argument("encoder: layers must be >= 1");
        if (heads == 0 || hidden % heads != 0)
            throw std::invalid_argument("encoder: hidden must be divisible by heads");
        if (max_len < 2) throw std::invalid_argument("encoder: max_len must be >= 2");
        if (vocab_size <= special::count) throw std::invalid_argument("encoder: vocab too small");
        if (ffn_mult == 0) throw std::invalid_argument("encoder: ffn_mult must be >= 1");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0))
            throw std::invalid_argument("encoder: dropout_p must be in [0, 1)");
    }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"layers", c.layers}, {"heads", c.heads},       {"hidden", c.hidden},
         {"ffn_mult", c.ffn_mult}, {"max_len", c.max_len}, {"vocab_size", c.vocab_size},
         {"dropout_p", c.dropout_p}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    j.at("layers").get_to(c.layers);
    j.at("heads").get_to(c.heads);
    j.at("hidden").get_to(c.hidden);
    j.at("ffn_mult").get_to(c.ffn_mult);
    j.at("max_len").get_to(c.max_len);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("dropout_p").get_to(c.dropout_p);
    c.validate();
}

/// Token ids and attention mask of a minibatch, row-major (rows, len).
struct Batch {
    std::size_t rows = 0, len = 0;
    std::vector<int> ids;
    std::vector<int> mask;
    std::vector<std::size_t> true_len;

    template <class T>
    std::vector<T> mask_as() const {
        return std::vector<T>(mask.begin(), mask.end());
    }
    int id(std::size_t r, std::size_t p) const { return ids[r * len + p]; }
};

/// Stacks encoded sequences. With `trim` the length is cut to the longest
/// true length in the batch; padded keys are masked, so real positions see
/// identical outputs either way.
inline Batch make_batch(std::span<const TokenSeq> seqs, bool trim = true) {
    if (seqs.empty()) throw std::invalid_argument("make_batch: empty batch");
    Batch b;
    b.rows = seqs.size();
    const std::size_t full = seqs[0].ids.size();
    b.len = 0;
    for (const auto& s : seqs) {
        if (s.ids.size() != full) throw std::invalid_argument("make_batch: ragged sequences");
        b.len = std::max(b.len, s.true_len);
    }
    if (!trim) b.len = full;
    b.ids.reserve(b.rows * b.len);
    b.mask.reserve(b.rows * b.len);
    for (const auto& s : seqs) {
        b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.begin() + static_cast<std::ptrdiff_t>(b.len));
        b.mask.insert(b.mask.end(), s.attention_mask.begin(),
                      s.attention_mask.begin() + static_cast<std::ptrdiff_t>(b.len));
        b.true_len.push_back(s.true_len);
    }
    return b;
}

inline std::string layer_name(std::size_t i, const std::string& leaf) {
    return "layer" + std::to_string(i) + "." + leaf;
}

template <class T>
void init_encoder(ParamStore<T>& params, const EncoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t h = cfg.hidden, f = cfg.hidden * cfg.ffn_mult;
    auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
        params.add(name, {in, out}, nn::truncated_normal<T>(in * out, 0.02, rng));
    };
    auto zeros = [&](const std::string& name, std::size_t n) {
        params.add(name, {n}, std::vector<T>(n, T(0)));
    };
    auto norm = [&](const std::string& prefix) {
        params.add(prefix + ".g", {h}, std::vector<T>(h, T(1)));
        zeros(prefix + ".b", h);
    };
    weight("embed.token", cfg.vocab_size, h);
    weight("embed.pos", cfg.max_len, h);
    norm("embed.ln");
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        for (const char* m : {"q", "k", "v", "o"}) {
            weight(layer_name(i, std::string("attn.") + m), h, h);
            zeros(layer_name(i, std::string("attn.") + m + ".bias"), h);
        }
        weight(layer_name(i, "ffn.w1"), h, f);
        zeros(layer_name(i, "ffn.w1.bias"), f);
        weight(layer_name(i, "ffn.w2"), f, h);
        zeros(layer_name(i, "ffn.w2.bias"), h);
        norm(layer_name(i, "ln1"));
        norm(layer_name(i, "ln2"));
    }
}

/// x·W + b for a parameter pair named `name` / `name.bias`.
template <class T>
Tensor<T> linear(const ParamStore<T>& params, const std::string& name, const Tensor<T>& x) {
    return nn::add(nn::matmul(x, params.at(name)), params.at(name + ".bias"));
}

template <class T>
Tensor<T> layer_norm(const ParamStore<T>& params, const std::string& prefix, const Tensor<T>& x) {
    return nn::layer_norm(x, params.at(prefix + ".g"), params.at(prefix + ".b"));
}

/// Token + position embedding, embedding layer norm, and (only when a seed is
/// given) dropout with the configured rate. Result (rows, len, hidden).
template <class T>
Tensor<T> embed(const ParamStore<T>& params, const EncoderConfig& cfg, const Batch& batch,
                std::optional<std::uint64_t> dropout_seed = std::nullopt) {
    if (batch.len > cfg.max_len) throw std::invalid_argument("embed: batch longer than max_len");
    for (int id : batch.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw std::out_of_range("embed: token id " + std::to_string(id) + " out of range");
    }
    std::vector<int> pos(batch.len);
    for (std::size_t p = 0; p < batch.len; ++p) pos[p] = static_cast<int>(p);
    auto tok = nn::embedding(params.at("embed.token"), std::span<const int>(batch.ids), {batch.rows, batch.len});
    auto x = nn::add(tok, nn::embedding(params.at("embed.pos"), std::span<const int>(pos), {batch.len}));
    x = layer_norm(params, "embed.ln", x);
    if (dropout_seed) x = nn::dropout(x, cfg.dropout_p, *dropout_seed);
    return x;
}

/// Hidden states of every layer; index 0 is the embedding output.
template <class T>
struct HiddenStack {
    std::vector<Tensor<T>> states;
    std::size_t depth() const { return states.size() - 1; }
    const Tensor<T>& final() const { return states.back(); }
};

template <class T>
HiddenStack<T> encode_from_embeddings(const ParamStore<T>& params, const EncoderConfig& cfg,
                                      const Tensor<T>& emb, const Batch& batch) {
    if (emb.rank() != 3 || emb.dim(0) != batch.rows || emb.dim(1) != batch.len ||
        emb.dim(2) != cfg.hidden) {
        nn::shape_fail("encode_from_embeddings", emb.shape(), Shape{batch.rows, batch.len, cfg.hidden});
    }
    if (batch.mask.size() != batch.rows * batch.len)
        throw nn::ShapeError("encode_from_embeddings: attention mask does not match batch");
    const auto mask = batch.mask_as<T>();
    HiddenStack<T> stack;
    stack.states.push_back(emb);
    Tensor<T> x = emb;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
        auto q = linear(params, layer_name(i, "attn.q"), x);
        auto k = linear(params, layer_name(i, "attn.k"), x);
        auto v = linear(params, layer_name(i, "attn.v"), x);
        auto a = linear(params, layer_name(i, "attn.o"),
                        nn::attention(q, k, v, std::span<const T>(mask), cfg.heads));
        x = layer_norm(params, layer_name(i, "ln1"), nn::add(x, a));
        auto f = linear(params, layer_name(i, "ffn.w2"), nn::gelu(linear(params, layer_name(i, "ffn.w1"), x)));
        x = layer_norm(params, layer_name(i, "ln2"), nn::add(x, f));
        stack.states.push_back(x);
    }
    return stack;
}

template <class T>
HiddenStack<T> encode(const ParamStore<T>& params, const EncoderConfig& cfg, const Batch& batch) {
    return encode_from_embeddings(params, cfg, embed(params, cfg, batch), batch);
}

/// Position-0 state of layer `layer`, shape (rows, hidden).
template <class T>
Tensor<T> cls_vector(const HiddenStack<T>& stack, std::size_t layer) {
    if (layer >= stack.states.size())
        throw std::out_of_range("cls_vector: layer " + std::to_string(layer) + " beyond depth " +
                                std::to_string(stack.depth()));
    return nn::select(stack.states[layer], 1, 0);
}

}  // namespace urlbert
