// URL corpora: plain and labeled loaders, a grammar-driven synthetic URL
// generator, and seeded train/test splitting.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace urlbert {

struct UrlRecord {
    std::string url;
    std::optional<int> label;
    std::optional<int> task_id;

    bool operator==(const UrlRecord&) const = default;
};

class CorpusError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t extra = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            extra = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= s.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        // overlong forms and surrogates
        if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) ||
            (extra == 3 && (cp < 0x10000 || cp > 0x10FFFF)) || (cp >= 0xD800 && cp <= 0xDFFF)) {
            return false;
        }
        i += extra + 1;
    }
    return true;
}

inline std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n\f\v";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

inline std::ifstream open_input(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorpusError("cannot read " + path.string());
    return in;
}

}  // namespace detail

/// One URL per line; blank and whitespace-only lines are skipped.
inline std::vector<UrlRecord> load_corpus(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    std::vector<UrlRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!detail::valid_utf8(line)) {
            throw CorpusError(path.string() + ":" + std::to_string(lineno) + ": invalid UTF-8");
        }
        auto t = detail::trim(line);
        if (t.empty()) continue;
        out.push_back({std::string(t), std::nullopt, std::nullopt});
    }
    if (in.bad()) throw CorpusError("read failure on " + path.string());
    return out;
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<UrlRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write " + path.string());
    for (const auto& r : records) out << r.url << '\n';
}

struct LabeledSet {
    std::vector<UrlRecord> records;
    std::size_t num_classes = 0;  // distinct labels observed
};

/// TSV `url<TAB>label`; lines starting with '#' are headers/comments.
inline LabeledSet load_labeled(const std::filesystem::path& path, int task_id) {
    auto in = detail::open_input(path);
    LabeledSet out;
    std::set<int> classes;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto where = path.string() + ":" + std::to_string(lineno) + ": ";
        if (!detail::valid_utf8(line)) throw CorpusError(where + "invalid UTF-8");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty() || line.front() == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
            throw CorpusError(where + "expected exactly two tab-separated fields");
        }
        const auto url = detail::trim(std::string_view(line).substr(0, tab));
        const auto lab = detail::trim(std::string_view(line).substr(tab + 1));
        if (url.empty()) throw CorpusError(where + "empty url");
        if (lab.empty() || !std::all_of(lab.begin() + (lab.front() == '-' ? 1 : 0), lab.end(),
                                        [](char c) { return c >= '0' && c <= '9'; }) ||
            lab == "-") {
            throw CorpusError(where + "label is not an integer");
        }
        if (lab.front() == '-') throw CorpusError(where + "negative label");
        int label = 0;
        try {
            label = std::stoi(std::string(lab));
        } catch (const std::out_of_range&) {
            throw CorpusError(where + "label out of range");
        }
        classes.insert(label);
        out.records.push_back({std::string(url), label, task_id});
    }
    out.num_classes = classes.size();
    return out;
}

inline void save_labeled(const std::filesystem::path& path, const std::vector<UrlRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CorpusError("cannot write " + path.string());
    for (const auto& r : records) {
        if (!r.label) throw CorpusError("save_labeled: record without label: " + r.url);
        out << r.url << '\t' << *r.label << '\n';
    }
}

inline void save_label_map(const std::filesystem::path& path, const std::vector<std::string>& names) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t i = 0; i < names.size(); ++i) j[std::to_string(i)] = names[i];
    std::ofstream out(path);
    if (!out) throw CorpusError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline std::map<int, std::string> load_label_map(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    const auto j = nlohmann::json::parse(in);
    std::map<int, std::string> out;
    for (const auto& [k, v] : j.items()) out[std::stoi(k)] = v.get<std::string>();
    return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus

template <class V>
using Weighted = std::vector<std::pair<V, double>>;

struct SynthFamily {
    std::string name;
    double weight = 1.0;
    std::vector<std::string> path_keywords;
    std::vector<std::string> domain_keywords;
    double domain_prob = 0.0;
};

struct SynthTask {
    std::string name;
    std::vector<std::string> families;  // label id = position
};

struct SynthGrammar {
    Weighted<std::string> schemes;
    Weighted<std::string> subdomains;
    std::vector<std::string> syllables;
    int domain_syllables_min = 2, domain_syllables_max = 3;
    Weighted<std::string> tlds;
    std::vector<std::string> path_words;
    int path_depth_min = 0, path_depth_max = 2;
    Weighted<std::string> path_suffixes;
    std::vector<std::string> query_keys;
    double query_prob = 0.5;
    int query_params_min = 1, query_params_max = 2;
    std::vector<SynthFamily> families;
    std::vector<SynthTask> tasks;

    const SynthFamily& family(std::string_view name) const {
        for (const auto& f : families)
            if (f.name == name) return f;
        throw CorpusError("grammar has no family '" + std::string(name) + "'");
    }
    const SynthTask& task(std::string_view name) const {
        for (const auto& t : tasks)
            if (t.name == name) return t;
        throw CorpusError("grammar has no task '" + std::string(name) + "'");
    }
};

inline SynthGrammar parse_grammar(const nlohmann::json& j) {
    auto weighted = [](const nlohmann::json& a) {
        Weighted<std::string> w;
        for (const auto& e : a) w.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
        if (w.empty()) throw CorpusError("grammar: empty weighted table");
        return w;
    };
    SynthGrammar g;
    g.schemes = weighted(j.at("schemes"));
    g.subdomains = weighted(j.at("subdomains"));
    g.syllables = j.at("syllables").get<std::vector<std::string>>();
    g.domain_syllables_min = j.at("domain_syllables").at(0);
    g.domain_syllables_max = j.at("domain_syllables").at(1);
    g.tlds = weighted(j.at("tlds"));
    g.path_words = j.at("path_words").get<std::vector<std::string>>();
    g.path_depth_min = j.at("path_depth").at(0);
    g.path_depth_max = j.at("path_depth").at(1);
    g.path_suffixes = weighted(j.at("path_suffixes"));
    g.query_keys = j.at("query_keys").get<std::vector<std::string>>();
    g.query_prob = j.at("query_prob");
    g.query_params_min = j.at("query_params").at(0);
    g.query_params_max = j.at("query_params").at(1);
    for (const auto& f : j.at("families")) {
        SynthFamily fam;
        fam.name = f.at("name");
        fam.weight = f.value("weight", 1.0);
        fam.path_keywords = f.at("path").get<std::vector<std::string>>();
        fam.domain_keywords = f.value("domain", std::vector<std::string>{});
        fam.domain_prob = f.value("domain_prob", 0.0);
        if (fam.path_keywords.empty()) throw CorpusError("grammar: family " + fam.name + " has no keywords");
        g.families.push_back(std::move(fam));
    }
    for (const auto& t : j.value("tasks", nlohmann::json::array())) {
        g.tasks.push_back({t.at("name"), t.at("families").get<std::vector<std::string>>()});
        for (const auto& f : g.tasks.back().families) (void)g.family(f);
    }
    if (g.families.empty() || g.syllables.empty()) throw CorpusError("grammar: no families or syllables");
    return g;
}

inline SynthGrammar load_grammar(const std::filesystem::path& path) {
    auto in = detail::open_input(path);
    try {
        return parse_grammar(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw CorpusError(path.string() + ": " + e.what());
    }
}

namespace detail {

template <class V>
const V& pick(const Weighted<V>& table, std::mt19937_64& rng) {
    double total = 0;
    for (const auto& [v, w] : table) total += w;
    double r = std::uniform_real_distribution<double>(0.0, total)(rng);
    for (const auto& [v, w] : table) {
        if (r < w) return v;
        r -= w;
    }
    return table.back().first;
}

template <class V>
const V& pick(const std::vector<V>& pool, std::mt19937_64& rng) {
    return pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
}

inline int uniform(int lo, int hi, std::mt19937_64& rng) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline std::string synth_url(const SynthGrammar& g, const SynthFamily& fam, std::mt19937_64& rng) {
    std::string url = pick(g.schemes, rng) + "://";
    const auto& sub = pick(g.subdomains, rng);
    if (!sub.empty()) url += sub + ".";
    std::string domain;
    const int nsyl = uniform(g.domain_syllables_min, g.domain_syllables_max, rng);
    for (int i = 0; i < nsyl; ++i) domain += pick(g.syllables, rng);
    if (!fam.domain_keywords.empty() &&
        std::uniform_real_distribution<double>(0.0, 1.0)(rng) < fam.domain_prob) {
        domain = pick(fam.domain_keywords, rng) + "-" + domain;
    }
    url += domain + "." + pick(g.tlds, rng);

    std::vector<std::string> segments;
    const int depth = uniform(g.path_depth_min, g.path_depth_max, rng);
    for (int i = 0; i < depth; ++i) segments.push_back(pick(g.path_words, rng));
    const auto at = std::uniform_int_distribution<std::size_t>(0, segments.size())(rng);
    segments.insert(segments.begin() + static_cast<std::ptrdiff_t>(at), pick(fam.path_keywords, rng));
    for (const auto& s : segments) url += "/" + s;
    url += pick(g.path_suffixes, rng);

    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng) < g.query_prob) {
        const int nq = uniform(g.query_params_min, g.query_params_max, rng);
        for (int i = 0; i < nq; ++i) {
            url += (i == 0 ? "?" : "&") + pick(g.query_keys, rng) + "=";
            if (std::uniform_int_distribution<int>(0, 1)(rng) == 0) {
                url += std::to_string(std::uniform_int_distribution<int>(1000, 999999)(rng));
            } else {
                url += pick(g.syllables, rng) + pick(g.syllables, rng);
            }
        }
    }
    return url;
}

}  // namespace detail

/// Unlabeled URLs drawn from all grammar families by weight. Pure in
/// (n, seed, grammar).
inline std::vector<UrlRecord> synth_corpus(std::size_t n, std::uint64_t seed, const SynthGrammar& g) {
    if (n == 0) throw std::invalid_argument("synth_corpus: n must be at least 1");
    Weighted<std::size_t> fams;
    for (std::size_t i = 0; i < g.families.size(); ++i) fams.emplace_back(i, g.families[i].weight);
    std::mt19937_64 rng(seed);
    std::vector<UrlRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& fam = g.families[detail::pick(fams, rng)];
        out.push_back({detail::synth_url(g, fam, rng), std::nullopt, std::nullopt});
    }
    return out;
}

/// Labeled URLs for one grammar task; classes are balanced in expectation
/// and the label is the family's position in the task.
inline std::vector<UrlRecord> synth_labeled(std::size_t n, std::uint64_t seed, const SynthGrammar& g,
                                            std::string_view task_name, int task_id = 0) {
    if (n == 0) throw std::invalid_argument("synth_labeled: n must be at least 1");
    const auto& task = g.task(task_name);
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> cls(0, static_cast<int>(task.families.size()) - 1);
    std::vector<UrlRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = cls(rng);
        out.push_back({detail::synth_url(g, g.family(task.families[c]), rng), c, task_id});
    }
    return out;
}

// ---------------------------------------------------------------------------
// splitting

struct SplitSpec {
    double train_fraction = 0.8;
    std::uint64_t seed = 0;
    bool stratified = false;
};

struct Split {
    std::vector<UrlRecord> train, test;
    std::vector<std::string> warnings;
};

/// Seeded split; record order within each side follows the input order.
inline Split split(const std::vector<UrlRecord>& records, const SplitSpec& spec) {
    if (records.empty()) throw std::invalid_argument("split: no records");
    if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
        throw std::invalid_argument("split: train_fraction must lie in (0, 1)");
    }
    std::mt19937_64 rng(spec.seed);
    std::vector<char> to_train(records.size(), 0);
    Split out;
    auto take = [&](std::vector<std::size_t> idx) {
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto k = static_cast<std::size_t>(std::lround(spec.train_fraction * double(idx.size())));
        for (std::size_t i = 0; i < k && i < idx.size(); ++i) to_train[idx[i]] = 1;
    };
    if (spec.stratified) {
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < records.size(); ++i) by_class[records[i].label.value_or(-1)].push_back(i);
        for (auto& [c, idx] : by_class) {
            if (idx.size() == 1) {
                to_train[idx[0]] = 1;
                out.warnings.push_back("class " + std::to_string(c) + " has a single member; placed in train");
                continue;
            }
            take(std::move(idx));
        }
    } else {
        std::vector<std::size_t> idx(records.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        take(std::move(idx));
    }
    for (std::size_t i = 0; i < records.size(); ++i) (to_train[i] ? out.train : out.test).push_back(records[i]);
    return out;
}

/// Optional dataset-prep filter: drops URLs longer than max_chars.
inline std::vector<UrlRecord> filter_max_length(const std::vector<UrlRecord>& records, std::size_t max_chars) {
    std::vector<UrlRecord> out;
    for (const auto& r : records)
        if (r.url.size() <= max_chars) out.push_back(r);
    return out;
}

}  // namespace urlbert
