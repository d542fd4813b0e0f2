#include <catch_amalgamated.hpp>

#include <map>
#include <random>

#include "urlbert/corruption.hpp"

using namespace urlbert;

namespace {

constexpr std::size_t vocab = 40;

Batch random_batch(std::mt19937_64& rng, std::size_t rows, std::size_t len, int max_id = vocab - 1) {
    Batch b;
    b.rows = rows;
    b.len = len;
    for (std::size_t r = 0; r < rows; ++r) {
        const auto tl = std::uniform_int_distribution<std::size_t>(1, len)(rng);
        b.true_len.push_back(tl);
        for (std::size_t p = 0; p < len; ++p) {
            if (p == 0) {
                b.ids.push_back(special::cls);
            } else if (p < tl) {
                b.ids.push_back(std::uniform_int_distribution<int>(special::count, max_id)(rng));
            } else {
                b.ids.push_back(special::pad);
            }
            b.mask.push_back(p < tl);
        }
    }
    return b;
}

Batch single(std::size_t real) {
    std::mt19937_64 rng(1);
    Batch b = random_batch(rng, 1, real + 1);
    b.true_len[0] = real + 1;
    for (std::size_t p = 1; p <= real; ++p) {
        b.ids[p] = special::count + int(p % 30);
        b.mask[p] = 1;
    }
    return b;
}

}  // namespace

TEST_CASE("rstd examples", "[corruption]") {
    const auto b = single(40);
    const auto none = corrupt_rstd(b, 0, 0, vocab, 3);
    CHECK(none.corrupted_ids == b.ids);
    CHECK(none.labels[0] == -1);
    CHECK(std::count(none.labels.begin(), none.labels.end(), 2) == 40);

    const auto c = corrupt_rstd(b, 0.05, 0.05, vocab, 3);
    CHECK(std::count(c.labels.begin(), c.labels.end(), 0) == 2);
    CHECK(std::count(c.labels.begin(), c.labels.end(), 1) == 2);
    CHECK(corrupt_rstd(b, 0.05, 0.05, vocab, 3).corrupted_ids == c.corrupted_ids);

    CHECK_THROWS(corrupt_rstd(b, 0.5, 0.5, vocab, 3));
    CHECK_THROWS(corrupt_rstd(b, -0.1, 0.0, vocab, 3));
    CHECK_THROWS(corrupt_rstd(b, 0.05, 0.05, special::count + 7, 3));
    CHECK_NOTHROW(corrupt_rstd(b, 0.05, 0.05, special::count + 8, 3));
}

TEST_CASE("ceiling arithmetic", "[corruption]") {
    CHECK(ceil_count(0.05, 40) == 2);
    CHECK(ceil_count(0.05, 41) == 3);
    CHECK(ceil_count(0.15, 1000) == 150);
    CHECK(shuffle_count(0.05, 10) == 2);
    CHECK(shuffle_count(0.05, 1) == 0);
    CHECK(shuffle_count(0.0, 10) == 0);
    CHECK(replace_count(0.05, 3, 2) == 1);
}

TEST_CASE("rstd invariants over seeded batches", "[corruption][property]") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 1000; ++trial) {
        // small id range forces duplicate selections
        const int max_id = trial % 2 ? special::count + 2 : int(vocab) - 1;
        const auto b = random_batch(rng, 4, 24, max_id);
        const double rs = trial % 3 == 0 ? 0.0 : 0.05 + 0.1 * (trial % 4);
        const double rr = trial % 5 == 0 ? 0.0 : 0.05 + 0.05 * (trial % 3);
        const auto c = corrupt_rstd(b, rs, rr, vocab, rng());
        for (std::size_t r = 0; r < b.rows; ++r) {
            const std::size_t n = b.true_len[r] - 1;
            std::size_t shu = 0, rep = 0;
            std::map<int, std::size_t> mult;
            for (std::size_t p = 0; p < b.len; ++p) {
                const auto i = r * b.len + p;
                const int lab = c.labels[i];
                if (p == 0 || p >= b.true_len[r]) {
                    REQUIRE(lab == -1);
                    REQUIRE(c.corrupted_ids[i] == b.ids[i]);
                    continue;
                }
                REQUIRE(lab >= 0);
                if (lab == 2) REQUIRE(c.corrupted_ids[i] == b.ids[i]);
                if (lab == 1) {
                    REQUIRE(c.corrupted_ids[i] != b.ids[i]);
                    REQUIRE(c.corrupted_ids[i] >= special::count);
                }
                if (lab == 0) ++mult[b.ids[i]];
                shu += lab == 0;
                rep += lab == 1;
            }
            const auto ks = shuffle_count(rs, n);
            REQUIRE(shu == ks);
            REQUIRE(rep == replace_count(rr, n, ks));
            std::size_t top = 0;
            for (auto& [_, m] : mult) top = std::max(top, m);
            if (ks >= 2 && 2 * top <= ks) {
                for (std::size_t p = 1; p < b.true_len[r]; ++p) {
                    const auto i = r * b.len + p;
                    if (c.labels[i] == 0) REQUIRE(c.corrupted_ids[i] != b.ids[i]);
                }
            }
        }
    }
}

TEST_CASE("mask_mlm examples and 80/10/10 split", "[corruption]") {
    const auto b = single(40);
    const auto none = mask_mlm(b, 0.0, vocab, 1);
    CHECK(std::all_of(none.targets.begin(), none.targets.end(), [](int t) { return t == -1; }));
    CHECK_THROWS(mask_mlm(b, 1.0, vocab, 1));
    CHECK(mask_mlm(b, 0.15, vocab, 9).masked_ids == mask_mlm(b, 0.15, vocab, 9).masked_ids);

    const auto big = single(1000);
    const auto m = mask_mlm(big, 0.15, 1024, 4);
    CHECK(std::count_if(m.targets.begin(), m.targets.end(), [](int t) { return t >= 0; }) == 150);

    std::mt19937_64 rng(8);
    std::size_t sel = 0, masked = 0, random = 0, same = 0;
    while (sel < 10000) {
        const auto batch = random_batch(rng, 8, 64);
        const auto mm = mask_mlm(batch, 0.15, 100000, rng());
        for (std::size_t i = 0; i < batch.ids.size(); ++i) {
            if (mm.targets[i] < 0) {
                REQUIRE(mm.masked_ids[i] == batch.ids[i]);
                continue;
            }
            REQUIRE(mm.targets[i] == batch.ids[i]);
            ++sel;
            if (mm.masked_ids[i] == special::mask) ++masked;
            else if (mm.masked_ids[i] == batch.ids[i]) ++same;
            else ++random;
        }
    }
    CHECK(std::abs(double(masked) / sel - 0.8) <= 0.03);
    CHECK(std::abs(double(random) / sel - 0.1) <= 0.03);
    CHECK(std::abs(double(same) / sel - 0.1) <= 0.03);
}

TEST_CASE("audit dump lists every real token", "[corruption]") {
    std::vector<std::string> pieces;
    for (int i = 0; i < 40; ++i) pieces.push_back("t" + std::to_string(i));
    const Vocab v(pieces);
    const auto b = single(10);
    const auto text = corruption_audit(v, b, corrupt_rstd(b, 0.2, 0.1, v.size(), 1), mask_mlm(b, 0.15, v.size(), 1));
    CHECK(std::count(text.begin(), text.end(), '\n') == 12);
    CHECK(text.find("SHU") != std::string::npos);
    CHECK(text.find("REP") != std::string::npos);
}
