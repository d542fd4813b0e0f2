// URL subword tokenizer: WordPiece-style vocabulary training by
// likelihood-gain merges, greedy longest-match encoding, and decoding.
//
// Text is lowercased (ASCII) and pre-split into words: maximal runs of
// ASCII letters/digits, with every other code point a one-character word.
// Multi-character pieces that continue a word carry the "##" prefix;
// single characters are shared between word-initial and continuation use.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "urlbert/corpus.hpp"

namespace urlbert {

namespace special {
inline constexpr int pad = 0;
inline constexpr int unk = 1;
inline constexpr int cls = 2;
inline constexpr int mask = 3;
inline constexpr int rep = 4;
inline constexpr int shu = 5;
inline constexpr int count = 6;
inline constexpr std::array<std::string_view, 6> names = {"[PAD]", "[UNK]", "[CLS]",
                                                          "[MASK]", "[REP]", "[SHU]"};
}  // namespace special

inline constexpr std::string_view continuation_prefix = "##";

class TokenizerError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class Vocab {
  public:
    Vocab() : Vocab(std::vector<std::string>{}) {}

    /// `pieces` excludes the special tokens, which always occupy ids 0-5.
    explicit Vocab(std::vector<std::string> pieces) {
        for (auto s : special::names) tokens_.emplace_back(s);
        for (auto& p : pieces) tokens_.push_back(std::move(p));
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            const auto& t = tokens_[i];
            if (i >= special::count) {
                if (t.empty() || t == continuation_prefix) throw TokenizerError("vocab: empty token");
                if (std::any_of(t.begin(), t.end(), [](char c) { return c >= 'A' && c <= 'Z'; })) {
                    throw TokenizerError("vocab: token '" + t + "' has uppercase letters");
                }
            }
            if (!index_.emplace(t, static_cast<int>(i)).second) {
                throw TokenizerError("vocab: duplicate token '" + t + "'");
            }
            max_chars_ = std::max(max_chars_, t.size());
        }
    }

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw TokenizerError("vocab: id " + std::to_string(id) + " out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }
    std::optional<int> find(std::string_view tok) const {
        auto it = index_.find(std::string(tok));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    bool contains(std::string_view tok) const { return find(tok).has_value(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    std::size_t max_token_bytes() const { return max_chars_; }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["version"] = 1;
        j["specials"] = std::vector<std::string>(tokens_.begin(), tokens_.begin() + special::count);
        j["continuation_prefix"] = std::string(continuation_prefix);
        j["tokens"] = tokens_;
        return j;
    }

    static Vocab from_json(const nlohmann::json& j) {
        if (j.value("version", 0) != 1) throw TokenizerError("vocab: unsupported version");
        if (j.value("continuation_prefix", std::string{}) != continuation_prefix) {
            throw TokenizerError("vocab: unsupported continuation prefix");
        }
        auto toks = j.at("tokens").get<std::vector<std::string>>();
        if (toks.size() < special::count) throw TokenizerError("vocab: missing special tokens");
        for (int i = 0; i < special::count; ++i) {
            if (toks[static_cast<std::size_t>(i)] != special::names[static_cast<std::size_t>(i)]) {
                throw TokenizerError("vocab: special token at id " + std::to_string(i) + " is not " +
                                     std::string(special::names[static_cast<std::size_t>(i)]));
            }
        }
        return Vocab(std::vector<std::string>(toks.begin() + special::count, toks.end()));
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw TokenizerError("cannot write " + path.string());
        out << to_json().dump(1) << '\n';
    }

    static Vocab load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw TokenizerError("cannot read " + path.string());
        return from_json(nlohmann::json::parse(in));
    }

    bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    std::size_t max_chars_ = 0;
};

struct TokenSeq {
    std::vector<int> ids;
    std::vector<std::uint8_t> attention_mask;
    std::size_t true_len = 0;
};

namespace detail {

inline std::string to_lower_ascii(std::string_view s) {
    std::string out(s);
    for (auto& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

inline std::size_t utf8_len(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead & 0xE0) == 0xC0) return 2;
    if ((lead & 0xF0) == 0xE0) return 3;
    if ((lead & 0xF8) == 0xF0) return 4;
    return 1;
}

inline bool is_word_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

/// Lowercased text split into words, each word a list of code points.
inline std::vector<std::vector<std::string>> pre_tokenize(std::string_view text) {
    const std::string s = to_lower_ascii(text);
    std::vector<std::vector<std::string>> words;
    std::vector<std::string> cur;
    std::size_t i = 0;
    while (i < s.size()) {
        const auto n = std::min(utf8_len(static_cast<unsigned char>(s[i])), s.size() - i);
        std::string cp = s.substr(i, n);
        i += n;
        if (n == 1 && is_word_char(cp[0])) {
            cur.push_back(std::move(cp));
            continue;
        }
        if (!cur.empty()) words.push_back(std::move(cur));
        cur.clear();
        words.push_back({std::move(cp)});
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

inline std::string_view strip_continuation(std::string_view t) {
    return t.starts_with(continuation_prefix) ? t.substr(continuation_prefix.size()) : t;
}

}  // namespace detail

/// Greedy merge training. Each round merges the adjacent symbol pair with the
/// largest unigram likelihood gain f_ab·log(f_ab·N / (f_a·f_b)); ties go to
/// the more frequent pair, then the lexicographically smaller result.
/// `seed` is accepted for interface stability; training is deterministic.
inline Vocab train_vocab(const std::vector<UrlRecord>& corpus, std::size_t target_size,
                         [[maybe_unused]] std::uint64_t seed = 0) {
    if (corpus.empty()) throw TokenizerError("train_vocab: empty corpus");

    std::map<std::vector<std::string>, std::int64_t> word_counts;
    for (const auto& r : corpus)
        for (auto& w : detail::pre_tokenize(r.url)) ++word_counts[w];

    // Symbol table: alphabet first (sorted), then merged pieces in merge order.
    std::vector<std::string> symbols;
    std::unordered_map<std::string, int> symbol_id;
    auto intern = [&](const std::string& s) {
        auto [it, fresh] = symbol_id.emplace(s, static_cast<int>(symbols.size()));
        if (fresh) symbols.push_back(s);
        return it->second;
    };
    std::vector<std::string> alphabet;
    {
        std::unordered_set<std::string> chars;
        for (const auto& [w, c] : word_counts)
            for (const auto& cp : w) chars.insert(cp);
        alphabet.assign(chars.begin(), chars.end());
        std::sort(alphabet.begin(), alphabet.end());
    }
    if (target_size < special::count + alphabet.size()) {
        throw TokenizerError("train_vocab: target size " + std::to_string(target_size) +
                             " cannot hold " + std::to_string(special::count) + " specials plus " +
                             std::to_string(alphabet.size()) + " alphabet characters");
    }
    for (const auto& a : alphabet) intern(a);
    std::size_t vocab_size = special::count + alphabet.size();

    struct Word {
        std::vector<int> syms;
        std::int64_t count;
    };
    std::vector<Word> words;
    words.reserve(word_counts.size());
    for (const auto& [w, c] : word_counts) {
        Word word{{}, c};
        for (const auto& cp : w) word.syms.push_back(symbol_id.at(cp));
        words.push_back(std::move(word));
    }

    // Symbols are bare strings; the continuation marker is attached only when a
    // merged piece enters the vocabulary, according to where it was used.
    std::unordered_map<std::uint64_t, std::int64_t> pair_count;
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> pair_words;
    std::unordered_map<int, std::int64_t> sym_count;
    std::int64_t total_syms = 0;
    auto key = [](int a, int b) { return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b); };
    auto account = [&](std::size_t wi, int sign) {
        const auto& w = words[wi];
        for (std::size_t i = 0; i < w.syms.size(); ++i) {
            sym_count[w.syms[i]] += sign * w.count;
            total_syms += sign * w.count;
            if (i + 1 < w.syms.size()) {
                const auto k = key(w.syms[i], w.syms[i + 1]);
                pair_count[k] += sign * w.count;
                if (sign > 0) pair_words[k].push_back(wi);
            }
        }
    };
    for (std::size_t wi = 0; wi < words.size(); ++wi) account(wi, +1);

    std::vector<std::string> pieces(alphabet);
    std::unordered_set<std::string> piece_set(alphabet.begin(), alphabet.end());

    while (vocab_size < target_size) {
        std::uint64_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        std::int64_t best_freq = 0;
        std::string best_text;
        bool found = false;
        for (const auto& [k, f] : pair_count) {
            if (f <= 0) continue;
            const int a = static_cast<int>(k >> 32), b = static_cast<int>(k & 0xffffffffu);
            const double score = double(f) * std::log(double(f) * double(total_syms) /
                                                      (double(sym_count[a]) * double(sym_count[b])));
            if (found && score < best_score) continue;
            std::string text = symbols[static_cast<std::size_t>(a)] + symbols[static_cast<std::size_t>(b)];
            if (found && score == best_score &&
                (f < best_freq || (f == best_freq && text >= best_text))) {
                continue;
            }
            best = k;
            best_score = score;
            best_freq = f;
            best_text = std::move(text);
            found = true;
        }
        if (!found) break;
        const int a = static_cast<int>(best >> 32), b = static_cast<int>(best & 0xffffffffu);
        const int merged = intern(best_text);

        auto affected = std::move(pair_words[best]);
        pair_words.erase(best);
        std::sort(affected.begin(), affected.end());
        affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
        bool initial_use = false, continuation_use = false;
        for (const auto wi : affected) {
            auto& w = words[wi];
            bool has = false;
            for (std::size_t i = 0; i + 1 < w.syms.size(); ++i)
                if (w.syms[i] == a && w.syms[i + 1] == b) has = true;
            if (!has) continue;
            account(wi, -1);
            std::vector<int> next;
            next.reserve(w.syms.size());
            for (std::size_t i = 0; i < w.syms.size(); ++i) {
                if (i + 1 < w.syms.size() && w.syms[i] == a && w.syms[i + 1] == b) {
                    (next.empty() ? initial_use : continuation_use) = true;
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(w.syms[i]);
                }
            }
            w.syms = std::move(next);
            account(wi, +1);
        }
        pair_count.erase(best);
        for (const auto& [piece, use] : {std::pair{best_text, initial_use},
                                         std::pair{std::string(continuation_prefix) + best_text,
                                                   continuation_use}}) {
            if (!use || vocab_size >= target_size || !piece_set.insert(piece).second) continue;
            pieces.push_back(piece);
            ++vocab_size;
        }
    }
    return Vocab(std::move(pieces));
}

/// Lowercase, pre-split, greedy longest-match per word; [CLS] first; pieces
/// beyond max_len are dropped from the right; padded with [PAD].
inline TokenSeq encode(const Vocab& vocab, std::string_view url, std::size_t max_len) {
    if (max_len < 2) throw TokenizerError("encode: max_len must be at least 2");
    TokenSeq seq;
    seq.ids.reserve(max_len);
    seq.ids.push_back(special::cls);
    const std::size_t cap = vocab.max_token_bytes();
    for (const auto& word : detail::pre_tokenize(url)) {
        if (seq.ids.size() >= max_len) break;
        std::size_t i = 0;
        while (i < word.size() && seq.ids.size() < max_len) {
            std::string span;
            std::vector<std::size_t> ends;
            for (std::size_t j = i; j < word.size() && span.size() + word[j].size() <= cap; ++j) {
                span += word[j];
                ends.push_back(span.size());
            }
            int id = -1;
            std::size_t used = 0;
            for (std::size_t e = ends.size(); e-- > 0;) {
                const std::string_view piece(span.data(), ends[e]);
                const auto hit = (e == 0 || i == 0)
                                     ? vocab.find(piece)
                                     : vocab.find(std::string(continuation_prefix) + std::string(piece));
                if (hit) {
                    id = *hit;
                    used = e + 1;
                    break;
                }
            }
            if (id < 0) {
                id = special::unk;
                used = 1;
            }
            seq.ids.push_back(id);
            i += used;
        }
    }
    seq.true_len = seq.ids.size();
    seq.attention_mask.assign(max_len, 0);
    std::fill_n(seq.attention_mask.begin(), seq.ids.size(), std::uint8_t{1});
    seq.ids.resize(max_len, special::pad);
    return seq;
}

inline std::string decode(const Vocab& vocab, const TokenSeq& seq) {
    std::string out;
    for (const int id : seq.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
            throw TokenizerError("decode: id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(vocab.size()));
        }
        if (id == special::unk) {
            out += special::names[special::unk];
            continue;
        }
        if (id < special::count) continue;
        out += detail::strip_continuation(vocab.token(id));
    }
    return out;
}

}  // namespace urlbert
