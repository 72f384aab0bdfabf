#include "smoa/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"

using namespace smoa;

namespace {

// one example-frequency count per label for a token, recomputed directly
std::map<int, std::map<int, size_t>> presence_by_label(const Dataset& data) {
    std::map<int, std::map<int, size_t>> out;
    for (const auto& ex : data.examples) {
        std::set<int> present(ex.a.begin(), ex.a.end());
        present.insert(ex.b.begin(), ex.b.end());
        for (int t : present) out[t][ex.label]++;
    }
    return out;
}

int key_in(const std::vector<int>& seg, int base, size_t n) {
    int found = -1;
    for (int t : seg) {
        if (t >= base && t < base + static_cast<int>(n)) {
            REQUIRE(found == -1);  // at most one key per segment
            found = t - base;
        }
    }
    REQUIRE(found != -1);
    return found;
}

std::map<int, size_t> label_counts(const Dataset& data) {
    std::map<int, size_t> counts;
    for (const auto& ex : data.examples) counts[ex.label]++;
    return counts;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool same_examples(const Dataset& x, const Dataset& y) {
    if (x.size() != y.size()) return false;
    for (size_t i = 0; i < x.size(); ++i) {
        const auto &a = x.examples[i], &b = y.examples[i];
        if (a.id != b.id || a.a != b.a || a.b != b.b || a.label != b.label || a.tags != b.tags)
            return false;
    }
    return true;
}

}  // namespace

TEST_CASE("task table is balanced per row and per column but not additive") {
    TaskSpec task = make_task(7);
    REQUIRE(task.table.size() == task.n_keys * task.n_keys);
    size_t per = task.n_keys / task.n_classes;
    for (size_t i = 0; i < task.n_keys; ++i) {
        std::map<int, size_t> row, col;
        for (size_t j = 0; j < task.n_keys; ++j) {
            int rv = task.table[i * task.n_keys + j];
            int cv = task.table[j * task.n_keys + i];
            CHECK(rv >= 0);
            CHECK(rv < static_cast<int>(task.n_classes));
            row[rv]++;
            col[cv]++;
        }
        for (size_t c = 0; c < task.n_classes; ++c) {
            CHECK(row[static_cast<int>(c)] == per);
            CHECK(col[static_cast<int>(c)] == per);
        }
    }
    // not decomposable as f(key_a) + g(key_b) mod C for ANY f, g: such a
    // table would equal the closure of its first row and column everywhere
    bool decomposable = true;
    size_t n = task.n_keys;
    int C = static_cast<int>(task.n_classes);
    for (size_t i = 0; i < n && decomposable; ++i) {
        for (size_t j = 0; j < n; ++j) {
            int closed = (task.table[i * n] + task.table[j] - task.table[0] + C) % C;
            if (task.table[i * n + j] != closed) {
                decomposable = false;
                break;
            }
        }
    }
    CHECK_FALSE(decomposable);

    CHECK(task.label_of(0, 0) == task.table[0]);
    CHECK_THROWS_AS(task.label_of(task.n_keys, 0), IndexError);

    TaskSpec again = make_task(7);
    CHECK(again.table == task.table);
    CHECK(make_task(8).table != task.table);
}

TEST_CASE("task validation rejects broken layouts") {
    TaskSpec t;
    t.n_classes = 1;
    CHECK_THROWS_AS(make_task(t), ConfigError);

    t = TaskSpec{};
    t.n_keys = 8;  // not a multiple of 3
    CHECK_THROWS_AS(make_task(t), ConfigError);

    t = TaskSpec{};
    t.len_a_min = 9;
    t.len_a_max = 8;
    CHECK_THROWS_AS(make_task(t), ConfigError);

    t = TaskSpec{};
    t.vocab_size = 60;  // 28 reserved + 100 fillers will not fit
    CHECK_THROWS_AS(make_task(t), ConfigError);

    t = TaskSpec{};
    t.n_fillers = 8;
    CHECK_THROWS_AS(make_task(t), ConfigError);

    CHECK_THROWS_AS(gen_dataset(TaskSpec{}, {}, 10, 1), ConfigError);  // table missing
}

TEST_CASE("generated examples follow the key-pair rule exactly") {
    TaskSpec task = make_task(3);
    Dataset data = gen_dataset(task, {}, 600, 11);
    REQUIRE(data.size() == 600);

    auto counts = label_counts(data);
    size_t lo = data.size(), hi = 0;
    for (const auto& [label, c] : counts) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
    }
    CHECK(counts.size() == task.n_classes);
    CHECK(hi - lo <= 1);

    for (size_t i = 0; i < data.size(); ++i) {
        const auto& ex = data.examples[i];
        CHECK(ex.id == static_cast<int>(i));
        int ka = key_in(ex.a, task.a_key_base(), task.n_keys);
        int kb = key_in(ex.b, task.b_key_base(), task.n_keys);
        CHECK(ex.label == task.label_of(static_cast<size_t>(ka), static_cast<size_t>(kb)));
        CHECK(ex.a.size() >= task.len_a_min);
        CHECK(ex.a.size() <= task.len_a_max);  // no cue configured
        CHECK(ex.tags == std::vector<std::string>{"clean"});
        for (int t : ex.a) {
            CHECK(t >= task.a_key_base());
            CHECK(t < task.filler_base() + static_cast<int>(task.n_fillers));
        }
        // distinct fillers within each segment
        std::set<int> sa(ex.a.begin(), ex.a.end());
        CHECK(sa.size() == ex.a.size());
    }
}

TEST_CASE("generation is deterministic in the seed") {
    TaskSpec task = make_task(5);
    std::vector<BiasSpec> biases{{BiasFamily::lexical, 0.9, 0.7, 0, 0.34}};
    Dataset a = gen_dataset(task, biases, 300, 21);
    Dataset b = gen_dataset(task, biases, 300, 21);
    Dataset c = gen_dataset(task, biases, 300, 22);
    CHECK(same_examples(a, b));
    CHECK_FALSE(same_examples(a, c));
}

TEST_CASE("planted cues agree with labels at the requested strength") {
    TaskSpec task = make_task(13);
    std::vector<BiasSpec> biases{
        {BiasFamily::lexical, 0.95, 1.0, 0, 0.34},
        {BiasFamily::partial_input, 0.95, 1.0, 0, 0.34},
        {BiasFamily::overlap, 0.95, 1.0, 1, 0.34},
    };
    Dataset data = gen_dataset(task, biases, 6000, 17);

    CHECK(measured_bias_agreement(data, task, BiasFamily::lexical) == doctest::Approx(0.95).epsilon(0.021));
    CHECK(measured_bias_agreement(data, task, BiasFamily::partial_input) ==
          doctest::Approx(0.95).epsilon(0.021));
    CHECK(measured_bias_agreement(data, task, BiasFamily::overlap, 1) ==
          doctest::Approx(0.95).epsilon(0.021));

    // tags mirror the agreement events; spot-check against a direct read
    for (const auto& ex : data.examples) {
        int cue = -1;
        for (int t : ex.b) {
            if (t >= task.lexical_base() && t < task.lexical_base() + 3) cue = t - task.lexical_base();
        }
        REQUIRE(cue != -1);  // coverage 1.0
        bool tagged = std::count(ex.tags.begin(), ex.tags.end(), "lexical") > 0;
        CHECK(tagged == (cue == ex.label));
    }
}

TEST_CASE("coverage controls how often a cue is planted") {
    TaskSpec task = make_task(29);
    Dataset data = gen_dataset(task, {{BiasFamily::lexical, 0.95, 0.5, 0, 0.34}}, 4000, 31);
    size_t planted = 0;
    for (const auto& ex : data.examples) {
        for (int t : ex.b) {
            if (t >= task.lexical_base() && t < task.lexical_base() + 3) ++planted;
        }
    }
    CHECK(static_cast<double>(planted) / 4000.0 == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("overlap fractions split into two clean regimes") {
    TaskSpec task = make_task(41);
    BiasSpec overlap{BiasFamily::overlap, 0.95, 1.0, 0, 0.34};
    Dataset data = gen_dataset(task, {overlap}, 4000, 43);

    size_t high_desig = 0, n_desig = 0, high_other = 0, n_other = 0;
    for (const auto& ex : data.examples) {
        double f = overlap_fraction(ex);
        bool high = f >= kOverlapThreshold;
        CHECK((f < 0.40 || f >= 0.5));  // nothing straddles the threshold
        if (ex.label == 0) {
            ++n_desig;
            high_desig += high;
        } else {
            ++n_other;
            high_other += high;
        }
    }
    CHECK(static_cast<double>(high_desig) / static_cast<double>(n_desig) ==
          doctest::Approx(0.95).epsilon(0.03));
    CHECK(static_cast<double>(high_other) / static_cast<double>(n_other) ==
          doctest::Approx(0.05).epsilon(0.35));
}

TEST_CASE("overlap fraction oracle values") {
    Example ex;
    ex.a = {1, 2, 3};
    ex.b = {2, 3, 4, 5};
    CHECK(overlap_fraction(ex) == doctest::Approx(2.0 / 3.0));
    ex.a = {1, 1, 2};  // duplicates collapse
    ex.b = {2};
    CHECK(overlap_fraction(ex) == doctest::Approx(0.5));
    ex.a = {};
    CHECK_THROWS_AS(overlap_fraction(ex), InputError);
}

TEST_CASE("challenge splits defeat their own heuristic completely") {
    TaskSpec task = make_task(53);
    for (BiasFamily family :
         {BiasFamily::lexical, BiasFamily::partial_input, BiasFamily::overlap}) {
        BiasSpec bias;
        bias.family = family;
        bias.designated_label = 0;
        Dataset ch = gen_challenge(task, bias, 900, 59);
        REQUIRE(ch.size() == 900);
        CHECK(heuristic_accuracy(ch, task, family, 0) == 0.0);
        for (const auto& ex : ch.examples) {
            int ka = key_in(ex.a, task.a_key_base(), task.n_keys);
            int kb = key_in(ex.b, task.b_key_base(), task.n_keys);
            CHECK(ex.label == task.label_of(static_cast<size_t>(ka), static_cast<size_t>(kb)));
        }
        if (family == BiasFamily::overlap) {
            for (const auto& ex : ch.examples) {
                CHECK(overlap_fraction(ex) >= kOverlapThreshold);
                CHECK(ex.label != 0);
            }
        }
    }
}

TEST_CASE("heuristic accuracy tracks the planted agreement rate") {
    TaskSpec task = make_task(61);
    Dataset data = gen_dataset(task, {{BiasFamily::lexical, 0.95, 1.0, 0, 0.34}}, 4000, 67);
    CHECK(heuristic_accuracy(data, task, BiasFamily::lexical) == doctest::Approx(0.95).epsilon(0.02));
    // without the cue the heuristic has nothing to follow
    Dataset clean = gen_dataset(task, {}, 500, 71);
    CHECK(heuristic_accuracy(clean, task, BiasFamily::lexical) == 0.0);
    CHECK_THROWS_AS(measured_bias_agreement(clean, task, BiasFamily::lexical), InputError);
}

TEST_CASE("duplicate or malformed bias specs are rejected") {
    TaskSpec task = make_task(73);
    std::vector<BiasSpec> dup{{BiasFamily::lexical, 0.9, 1.0, 0, 0.34},
                              {BiasFamily::lexical, 0.8, 1.0, 0, 0.34}};
    CHECK_THROWS_AS(gen_dataset(task, dup, 10, 1), ConfigError);
    CHECK_THROWS_AS(gen_dataset(task, {{BiasFamily::lexical, 1.5, 1.0, 0, 0.34}}, 10, 1),
                    ConfigError);
    CHECK_THROWS_AS(gen_dataset(task, {{BiasFamily::overlap, 0.9, 1.0, 7, 0.34}}, 10, 1),
                    ConfigError);
    CHECK_THROWS_AS(gen_dataset(task, {}, 0, 1), ConfigError);
}

TEST_CASE("label-statistics filter flags exactly the planted token") {
    // Nine examples, labels 0..2 cycling. Token 7 rides along with label 0
    // three times; token 8 appears twice (below the frequency threshold);
    // token 9 appears once per label (ratio exactly 1/3).
    Dataset data;
    for (int i = 0; i < 9; ++i) {
        Example ex;
        ex.id = i;
        ex.label = i % 3;
        ex.a = {100 + i};
        ex.b = {200 + i};
        ex.tags = {"clean"};
        data.examples.push_back(ex);
    }
    for (int i : {0, 3, 6}) data.examples[static_cast<size_t>(i)].a.push_back(7);
    for (int i : {1, 4}) data.examples[static_cast<size_t>(i)].a.push_back(8);
    for (int i : {2, 4, 6}) data.examples[static_cast<size_t>(i)].b.push_back(9);
    // 9 lands on labels 2, 1, 0 — and example 6 is removed by token 7 anyway

    UnbiasedFilterReport report;
    Dataset kept = filter_unbiased(data, 3, 0.385, &report);
    CHECK(report.flagged_tokens == std::vector<int>{7});
    CHECK(report.removed == 3);
    CHECK(report.kept == 6);
    REQUIRE(kept.size() == 6);
    for (const auto& ex : kept.examples) {
        CHECK(std::count(ex.a.begin(), ex.a.end(), 7) == 0);
    }
    auto counts = label_counts(kept);
    CHECK(counts[1] == 3);
    CHECK(counts[2] == 3);

    // stable under a second pass
    UnbiasedFilterReport second;
    Dataset again = filter_unbiased(kept, 3, 0.385, &second);
    CHECK(second.flagged_tokens.empty());
    CHECK(same_examples(again, kept));

    // a corpus where the biased token is everywhere cannot be cleaned
    Dataset doomed;
    for (int i = 0; i < 6; ++i) {
        Example ex;
        ex.id = i;
        ex.label = 0;
        ex.a = {5};
        ex.b = {300 + i};
        doomed.examples.push_back(ex);
    }
    CHECK_THROWS_WITH_AS(filter_unbiased(doomed, 3, 0.385, nullptr),
                         doctest::Contains("flagged: 5"), InputError);
}

TEST_CASE("label-statistics filter isolates cue tokens in generated data") {
    TaskSpec task = make_task(83);
    // substitution stays 0: every substituted copy adds one distinct filler
    // to a high-overlap example only, eroding the high/low presence balance
    // the filter safety rests on
    std::vector<BiasSpec> biases{
        {BiasFamily::lexical, 0.95, 0.65, 0, 0.0},
        {BiasFamily::partial_input, 0.95, 0.65, 0, 0.0},
        {BiasFamily::overlap, 0.95, 0.65, 0, 0.0},
    };
    Dataset data = gen_dataset(task, biases, 20000, 89);

    UnbiasedFilterReport report;
    Dataset kept = filter_unbiased(data, 3, 0.385, &report);

    std::vector<int> expected;
    for (int c = 0; c < 3; ++c) expected.push_back(task.lexical_base() + c);
    for (int c = 0; c < 3; ++c) expected.push_back(task.marker_base() + c);
    std::sort(expected.begin(), expected.end());
    CHECK(report.flagged_tokens == expected);

    // survivors carry no cue token and stay balanced
    for (const auto& ex : kept.examples) {
        for (int t : ex.a) {
            CHECK((t < task.lexical_base() || t >= task.filler_base()));
        }
        for (int t : ex.b) {
            CHECK((t < task.lexical_base() || t >= task.filler_base()));
        }
    }
    auto counts = label_counts(kept);
    size_t lo = kept.size(), hi = 0;
    for (const auto& [label, c] : counts) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
    }
    CHECK(lo == hi);
    // roughly the no-cue fraction 0.35 * 0.35 of the corpus survives
    CHECK(kept.size() > 1500);
    CHECK(kept.size() < 3200);

    // every key stays close to the uninformative ratio 1/3
    auto presence = presence_by_label(data);
    for (size_t k = 0; k < task.n_keys; ++k) {
        for (int base : {task.a_key_base(), task.b_key_base()}) {
            const auto& per_label = presence[base + static_cast<int>(k)];
            size_t total = 0, majority = 0;
            for (const auto& [label, c] : per_label) {
                total += c;
                majority = std::max(majority, c);
            }
            CHECK(static_cast<double>(majority) / static_cast<double>(total) < 0.37);
        }
    }
}

TEST_CASE("hard-example filter keeps exactly what the probe gets wrong") {
    TaskSpec task = make_task(97);
    Dataset data = gen_dataset(task, {{BiasFamily::partial_input, 0.95, 1.0, 0, 0.34}}, 120, 101);

    BackboneConfig cfg;
    cfg.vocab_size = task.vocab_size;
    cfg.max_len = 32;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.n_classes = 3;
    Rng rng(7);
    Model probe = build_backbone(cfg, rng);

    // oracle: recompute the segment-B-only predictions directly
    std::set<int> wrong_ids;
    {
        NoGradGuard guard;
        Batch batch = make_batch(data, 0, data.size());
        Tensor logits = partial_input_forward(probe, batch);
        for (size_t r = 0; r < data.size(); ++r) {
            size_t best = 0;
            for (size_t c = 1; c < 3; ++c) {
                if (logits.values()[r * 3 + c] > logits.values()[r * 3 + best]) best = c;
            }
            if (static_cast<int>(best) != data.examples[r].label) {
                wrong_ids.insert(data.examples[r].id);
            }
        }
    }

    HardFilterReport report;
    Dataset hard = filter_hard(data, probe, 32, /*balance=*/false, &report);
    CHECK(report.misclassified == wrong_ids.size());
    CHECK(hard.size() == wrong_ids.size());
    for (const auto& ex : hard.examples) CHECK(wrong_ids.count(ex.id) == 1);

    // balancing keeps per-label counts equal
    Dataset balanced = filter_hard(data, probe, 32, /*balance=*/true, nullptr);
    auto counts = label_counts(balanced);
    if (!counts.empty()) {
        size_t first = counts.begin()->second;
        for (const auto& [label, c] : counts) CHECK(c == first);
    }

    // examples the probe already solves produce an empty hard set
    std::vector<int> right_ids;
    for (const auto& ex : data.examples) {
        if (!wrong_ids.count(ex.id)) right_ids.push_back(ex.id);
    }
    if (!right_ids.empty()) {
        Dataset easy;
        for (const auto& ex : data.examples) {
            if (!wrong_ids.count(ex.id)) easy.examples.push_back(ex);
        }
        HardFilterReport empty_report;
        Dataset none = filter_hard(easy, probe, 32, false, &empty_report);
        CHECK(none.empty());
        CHECK(empty_report.misclassified == 0);
    }
}

TEST_CASE("hard-example filter reports a degenerate probe") {
    TaskSpec task = make_task(103);
    Dataset data = gen_dataset(task, {}, 60, 107);

    BackboneConfig cfg;
    cfg.vocab_size = task.vocab_size;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    Rng rng(7);
    Model probe = build_backbone(cfg, rng);
    probe.params.get("head.b").values() = {1000.0, 0.0, 0.0};

    HardFilterReport report;
    Dataset hard = filter_hard(data, probe, 32, false, &report);
    CHECK(report.degenerate_model);
    for (const auto& ex : hard.examples) CHECK(ex.label != 0);
    CHECK_THROWS_AS(filter_hard(Dataset{}, probe, 32, true, nullptr), InputError);
}

TEST_CASE("batches lay out [CLS] a [SEP] b [SEP] with segment ids and padding") {
    Dataset data;
    Example e0;
    e0.id = 0;
    e0.a = {10, 11};
    e0.b = {12};
    e0.label = 2;
    Example e1;
    e1.id = 1;
    e1.a = {13};
    e1.b = {14};
    e1.label = 1;
    data.examples = {e0, e1};

    Batch b = make_batch(data, {0, 1});
    REQUIRE(b.rows == 2);
    REQUIRE(b.len == 6);  // CLS + 2 + SEP + 1 + SEP
    CHECK(b.tokens == std::vector<int>{kClsId, 10, 11, kSepId, 12, kSepId,
                                       kClsId, 13, kSepId, 14, kSepId, kPadId});
    CHECK(b.segments == std::vector<int>{0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 1, 0});
    CHECK(b.mask == std::vector<unsigned char>{1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0});
    CHECK(b.labels == std::vector<int>{2, 1});

    CHECK_THROWS_AS(make_batch(data, {5}), IndexError);
    CHECK_THROWS_AS(make_batch(data, std::vector<size_t>{}), InputError);
}

TEST_CASE("jsonl round-trips datasets byte-stably") {
    TaskSpec task = make_task(109);
    Dataset data = gen_dataset(task, {{BiasFamily::lexical, 0.9, 0.8, 0, 0.34}}, 50, 113);

    const std::string path = "/tmp/smoa_data_test.jsonl";
    write_jsonl(data, path);
    Dataset back = read_jsonl(path);
    CHECK(same_examples(back, data));

    const std::string path2 = "/tmp/smoa_data_test2.jsonl";
    write_jsonl(back, path2);
    CHECK(slurp(path) == slurp(path2));

    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("jsonl reader reports the offending line") {
    const std::string path = "/tmp/smoa_bad.jsonl";
    {
        std::ofstream f(path);
        f << R"({"a":[1],"b":[2],"id":0,"label":1,"tags":["clean"]})" << "\n";
        f << "{not json}\n";
    }
    CHECK_THROWS_WITH_AS(read_jsonl(path), doctest::Contains(":2:"), ParseError);
    {
        std::ofstream f(path);
        f << R"({"a":[1],"b":[2],"id":0,"tags":["clean"]})" << "\n";
    }
    CHECK_THROWS_WITH_AS(read_jsonl(path), doctest::Contains("label"), ParseError);
    CHECK_THROWS_AS(read_jsonl("/tmp/does_not_exist.jsonl"), InputError);
    std::remove(path.c_str());
}

TEST_CASE("manifest summarizes a split") {
    TaskSpec task = make_task(127);
    Dataset data = gen_dataset(task, {{BiasFamily::lexical, 0.9, 1.0, 0, 0.34}}, 90, 131);
    nlohmann::json m = dataset_manifest(data, task, 131);
    CHECK(m["size"] == 90);
    CHECK(m["seed"] == 131);
    size_t total = 0;
    for (const auto& [label, c] : m["label_counts"].items()) total += c.get<size_t>();
    CHECK(total == 90);
    CHECK(m["task"]["table"].get<std::vector<int>>() == task.table);
    size_t tag_lex = m["tag_counts"].value("lexical", size_t{0});
    CHECK(tag_lex > 70);  // ~0.9 of 90
}
