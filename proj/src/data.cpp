#include "smoa/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace smoa {

int TaskSpec::label_of(size_t key_a, size_t key_b) const {
    if (key_a >= n_keys || key_b >= n_keys) throw IndexError("key index out of range");
    return table[key_a * n_keys + key_b];
}

std::string family_name(BiasFamily family) {
    switch (family) {
        case BiasFamily::lexical: return "lexical";
        case BiasFamily::partial_input: return "partial_input";
        case BiasFamily::overlap: return "overlap";
    }
    throw ContractError("unknown bias family");
}

BiasFamily family_from_name(const std::string& name) {
    if (name == "lexical") return BiasFamily::lexical;
    if (name == "partial_input") return BiasFamily::partial_input;
    if (name == "overlap") return BiasFamily::overlap;
    throw ConfigError("unknown bias family: " + name);
}

namespace {

// true when table[i][j] == (f(i) + g(j)) mod C for some f, g — equivalent
// to matching the closure T[i][0] + T[0][j] - T[0][0] everywhere
bool is_key_additive(const std::vector<int>& table, size_t n, size_t n_classes) {
    int c = static_cast<int>(n_classes);
    for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < n; ++j) {
            int closed = (table[i * n] + table[j] - table[0] + c) % c;
            if (table[i * n + j] != closed) return false;
        }
    }
    return true;
}

}  // namespace

TaskSpec make_task(TaskSpec base) {
    if (base.n_classes < 2) throw ConfigError("need at least two classes");
    if (base.n_keys < base.n_classes || base.n_keys % base.n_classes != 0) {
        throw ConfigError("n_keys must be a positive multiple of n_classes for a balanced table");
    }
    if (base.len_a_min < 2 || base.len_a_min > base.len_a_max || base.len_b_min < 2 ||
        base.len_b_min > base.len_b_max) {
        throw ConfigError("segment length ranges must satisfy 2 <= min <= max");
    }
    if (base.n_fillers < 16) throw ConfigError("filler pool too small");
    if (static_cast<size_t>(base.filler_base()) + base.n_fillers > base.vocab_size) {
        throw ConfigError("vocabulary too small to keep key, cue and filler token sets disjoint");
    }
    // additive base table: balanced per row and per column by construction
    base.table.assign(base.n_keys * base.n_keys, 0);
    for (size_t i = 0; i < base.n_keys; ++i) {
        for (size_t j = 0; j < base.n_keys; ++j) {
            base.table[i * base.n_keys + j] = static_cast<int>((i + j) % base.n_classes);
        }
    }
    // Balance-preserving swaps scramble the table so the rule needs both
    // keys. Alternating 2x2 blocks (xy/yx) do not exist in the additive
    // start, so alternating 6-cycles are mixed in; once a few of those land
    // the cheap 2x2 moves fire too.
    Rng rng(derive_seed(base.seed, "tasktable"));
    size_t n = base.n_keys;
    auto cell = [&](size_t r, size_t c) -> int& { return base.table[r * n + c]; };
    for (size_t round = 0; round < 64 && is_key_additive(base.table, n, base.n_classes);
         ++round) {
        for (size_t iter = 0; iter < 64 * n * n; ++iter) {
            size_t r1 = rng.below(n), r2 = rng.below(n), c1 = rng.below(n), c2 = rng.below(n);
            if (r1 == r2 || c1 == c2) continue;
            if (cell(r1, c1) == cell(r2, c2) && cell(r1, c2) == cell(r2, c1) &&
                cell(r1, c1) != cell(r1, c2)) {
                std::swap(cell(r1, c1), cell(r1, c2));
                std::swap(cell(r2, c1), cell(r2, c2));
                continue;
            }
            size_t r3 = rng.below(n), c3 = rng.below(n);
            if (r3 == r1 || r3 == r2 || c3 == c1 || c3 == c2) continue;
            int x = cell(r1, c1), y = cell(r1, c2);
            if (x != y && cell(r2, c2) == x && cell(r2, c3) == y && cell(r3, c3) == x &&
                cell(r3, c1) == y) {
                cell(r1, c1) = y;
                cell(r1, c2) = x;
                cell(r2, c2) = y;
                cell(r2, c3) = x;
                cell(r3, c3) = y;
                cell(r3, c1) = x;
            }
        }
    }
    if (is_key_additive(base.table, n, base.n_classes)) {
        throw ContractError("table scrambling failed to leave the additive family");
    }
    return base;
}

TaskSpec make_task(uint64_t seed) {
    TaskSpec base;
    base.seed = seed;
    return make_task(base);
}

double overlap_fraction(const Example& ex) {
    std::set<int> sa(ex.a.begin(), ex.a.end());
    if (sa.empty()) throw InputError("segment A empty");
    std::set<int> sb(ex.b.begin(), ex.b.end());
    size_t hits = 0;
    for (int t : sa) hits += sb.count(t);
    return static_cast<double>(hits) / static_cast<double>(sa.size());
}

namespace {

int wrong_label(Rng& rng, int label, size_t n_classes) {
    int w = static_cast<int>(rng.below(n_classes - 1));
    return w + (w >= label ? 1 : 0);
}

// distinct fillers, optionally avoiding a given set
std::vector<int> draw_fillers(const TaskSpec& task, Rng& rng, size_t count,
                              const std::set<int>* avoid) {
    if (count > task.n_fillers / 2) throw ConfigError("filler pool too small for segment length");
    std::set<int> used;
    std::vector<int> out;
    while (out.size() < count) {
        int tok = task.filler_base() + static_cast<int>(rng.below(task.n_fillers));
        if (used.count(tok) || (avoid && avoid->count(tok))) continue;
        used.insert(tok);
        out.push_back(tok);
    }
    return out;
}

void insert_at(std::vector<int>& v, size_t pos, int tok) {
    v.insert(v.begin() + static_cast<std::ptrdiff_t>(pos), tok);
}

struct BiasPlan {
    const BiasSpec* lexical = nullptr;
    const BiasSpec* partial = nullptr;
    const BiasSpec* overlap = nullptr;
};

BiasPlan plan_biases(const TaskSpec& task, const std::vector<BiasSpec>& biases) {
    BiasPlan plan;
    for (const auto& b : biases) {
        if (b.strength < 0.0 || b.strength > 1.0 || b.coverage < 0.0 || b.coverage > 1.0) {
            throw ConfigError("bias strength and coverage must lie in [0,1]");
        }
        const BiasSpec** slot = nullptr;
        switch (b.family) {
            case BiasFamily::lexical: slot = &plan.lexical; break;
            case BiasFamily::partial_input: slot = &plan.partial; break;
            case BiasFamily::overlap: slot = &plan.overlap; break;
        }
        if (*slot) throw ConfigError("duplicate bias family: " + family_name(b.family));
        if (b.family == BiasFamily::overlap &&
            (b.designated_label < 0 ||
             static_cast<size_t>(b.designated_label) >= task.n_classes)) {
            throw ConfigError("overlap designated_label out of range");
        }
        *slot = &b;
    }
    return plan;
}

// labels in a balanced ±1 schedule, shuffled
std::vector<int> label_schedule(Rng& rng, size_t size, const std::vector<int>& classes) {
    std::vector<int> labels;
    labels.reserve(size);
    for (size_t i = 0; i < size; ++i) labels.push_back(classes[i % classes.size()]);
    rng.shuffle(labels);
    return labels;
}

std::vector<std::vector<std::pair<size_t, size_t>>> pairs_by_label(const TaskSpec& task) {
    std::vector<std::vector<std::pair<size_t, size_t>>> pairs(task.n_classes);
    for (size_t i = 0; i < task.n_keys; ++i) {
        for (size_t j = 0; j < task.n_keys; ++j) {
            pairs[static_cast<size_t>(task.table[i * task.n_keys + j])].push_back({i, j});
        }
    }
    return pairs;
}

// B fillers for a high-overlap pair: A's fillers with round(rate*F)
// replaced by fresh distractors, in shuffled order. The substitution count
// is deterministic and capped so the overlap fraction — over full segment
// token sets, so segment A's key widens the denominator — never drops
// below the threshold.
// B fillers for a high-overlap pair: every filler of A, an optional
// substitution fraction swapped for distractors (capped so the copy stays
// above the overlap threshold), plus exactly one fresh token. The fresh
// token keeps the distinct-filler count of a high pair equal to a low
// pair's (see the header note on presence-frequency balance).
std::vector<int> copy_fillers(const TaskSpec& task, Rng& rng, const std::vector<int>& fillers_a,
                              double substitution) {
    std::vector<int> out = fillers_a;
    rng.shuffle(out);
    size_t fa = fillers_a.size();
    size_t max_subs = fa > 1 ? (fa - 1) / 2 : 0;
    size_t n_subs = static_cast<size_t>(substitution * static_cast<double>(fa) + 0.5);
    n_subs = std::min(n_subs, max_subs);
    std::set<int> avoid(fillers_a.begin(), fillers_a.end());
    auto fresh = draw_fillers(task, rng, n_subs + 1, &avoid);
    std::vector<size_t> pos(out.size());
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    rng.shuffle(pos);
    for (size_t s = 0; s < n_subs; ++s) out[pos[s]] = fresh[s];
    out.push_back(fresh[n_subs]);
    rng.shuffle(out);
    return out;
}

// B fillers for a low-overlap pair: one token shared with A (see the
// header note on presence-frequency balance), the rest fresh and disjoint.
std::vector<int> low_fillers(const TaskSpec& task, Rng& rng, const std::vector<int>& fillers_a,
                             size_t fb) {
    size_t s = std::min({size_t{1}, fillers_a.size(), fb});
    std::vector<int> shared = fillers_a;
    rng.shuffle(shared);
    shared.resize(s);
    std::set<int> avoid(fillers_a.begin(), fillers_a.end());
    auto fresh = draw_fillers(task, rng, fb - s, &avoid);
    std::vector<int> out = shared;
    out.insert(out.end(), fresh.begin(), fresh.end());
    rng.shuffle(out);
    return out;
}

}  // namespace

Dataset gen_dataset(const TaskSpec& task, const std::vector<BiasSpec>& biases, size_t size,
                    uint64_t seed) {
    if (size == 0) throw ConfigError("dataset size must be positive");
    if (task.table.size() != task.n_keys * task.n_keys) {
        throw ConfigError("task table missing; build the task with make_task");
    }
    BiasPlan plan = plan_biases(task, biases);
    Rng rng(derive_seed(seed, "dataset"));
    std::vector<int> classes(task.n_classes);
    for (size_t c = 0; c < task.n_classes; ++c) classes[c] = static_cast<int>(c);
    auto labels = label_schedule(rng, size, classes);
    auto pairs = pairs_by_label(task);

    Dataset data;
    data.examples.reserve(size);
    for (size_t idx = 0; idx < size; ++idx) {
        Example ex;
        ex.id = static_cast<int>(idx);
        ex.label = labels[idx];
        auto [ka, kb] = rng.pick(pairs[static_cast<size_t>(ex.label)]);

        size_t fa = task.len_a_min - 1 + rng.below(task.len_a_max - task.len_a_min + 1);
        std::vector<int> fillers_a = draw_fillers(task, rng, fa, nullptr);
        ex.a = fillers_a;
        insert_at(ex.a, rng.below(ex.a.size() + 1), task.a_key_base() + static_cast<int>(ka));

        size_t fb = task.len_b_min - 1 + rng.below(task.len_b_max - task.len_b_min + 1);
        std::vector<int> fillers_b;
        if (plan.overlap && rng.bernoulli(plan.overlap->coverage)) {
            bool agree = rng.bernoulli(plan.overlap->strength);
            bool designated = ex.label == plan.overlap->designated_label;
            bool high = agree == designated;
            if (high) {
                fillers_b = copy_fillers(task, rng, fillers_a, plan.overlap->substitution);
            } else {
                // one shared + one fresh: same distinct-filler footprint as a
                // high pair, so per-filler label ratios stay balanced
                fillers_b = low_fillers(task, rng, fillers_a, 2);
            }
            if (agree) ex.tags.push_back("overlap");
        } else {
            fillers_b = low_fillers(task, rng, fillers_a, fb);
        }
        ex.b = fillers_b;
        insert_at(ex.b, rng.below(ex.b.size() + 1), task.b_key_base() + static_cast<int>(kb));

        // both token cues live in segment B, mirroring annotation artifacts
        // that concentrate in the hypothesis side of a pair
        if (plan.lexical && rng.bernoulli(plan.lexical->coverage)) {
            bool agree = rng.bernoulli(plan.lexical->strength);
            int cue = agree ? ex.label : wrong_label(rng, ex.label, task.n_classes);
            insert_at(ex.b, rng.below(ex.b.size() + 1), task.lexical_base() + cue);
            if (agree) ex.tags.push_back("lexical");
        }
        if (plan.partial && rng.bernoulli(plan.partial->coverage)) {
            bool agree = rng.bernoulli(plan.partial->strength);
            int cue = agree ? ex.label : wrong_label(rng, ex.label, task.n_classes);
            insert_at(ex.b, rng.below(ex.b.size() + 1), task.marker_base() + cue);
            if (agree) ex.tags.push_back("partial_input");
        }

        if (ex.tags.empty()) ex.tags.push_back("clean");
        data.examples.push_back(std::move(ex));
    }
    return data;
}

Dataset gen_challenge(const TaskSpec& task, const BiasSpec& bias, size_t size, uint64_t seed) {
    if (size == 0) throw ConfigError("dataset size must be positive");
    if (task.table.size() != task.n_keys * task.n_keys) {
        throw ConfigError("task table missing; build the task with make_task");
    }
    plan_biases(task, {bias});
    Rng rng(derive_seed(seed, "challenge"));

    // the overlap cue is binary, so its challenge split can only use the
    // labels the cue contradicts
    std::vector<int> classes;
    for (size_t c = 0; c < task.n_classes; ++c) {
        if (bias.family == BiasFamily::overlap &&
            static_cast<int>(c) == bias.designated_label) {
            continue;
        }
        classes.push_back(static_cast<int>(c));
    }
    auto labels = label_schedule(rng, size, classes);
    auto pairs = pairs_by_label(task);

    Dataset data;
    data.examples.reserve(size);
    for (size_t idx = 0; idx < size; ++idx) {
        Example ex;
        ex.id = static_cast<int>(idx);
        ex.label = labels[idx];
        auto [ka, kb] = rng.pick(pairs[static_cast<size_t>(ex.label)]);

        size_t fa = task.len_a_min - 1 + rng.below(task.len_a_max - task.len_a_min + 1);
        std::vector<int> fillers_a = draw_fillers(task, rng, fa, nullptr);
        ex.a = fillers_a;
        insert_at(ex.a, rng.below(ex.a.size() + 1), task.a_key_base() + static_cast<int>(ka));

        std::vector<int> fillers_b;
        if (bias.family == BiasFamily::overlap) {
            // always high overlap while the label is never the designated one
            fillers_b = copy_fillers(task, rng, fillers_a, bias.substitution);
        } else {
            size_t fb = task.len_b_min - 1 + rng.below(task.len_b_max - task.len_b_min + 1);
            fillers_b = low_fillers(task, rng, fillers_a, fb);
        }
        ex.b = fillers_b;
        insert_at(ex.b, rng.below(ex.b.size() + 1), task.b_key_base() + static_cast<int>(kb));

        if (bias.family == BiasFamily::lexical) {
            int cue = wrong_label(rng, ex.label, task.n_classes);
            insert_at(ex.b, rng.below(ex.b.size() + 1), task.lexical_base() + cue);
        }
        if (bias.family == BiasFamily::partial_input) {
            int cue = wrong_label(rng, ex.label, task.n_classes);
            insert_at(ex.b, rng.below(ex.b.size() + 1), task.marker_base() + cue);
        }

        ex.tags.push_back("clean");  // the planted cue never agrees here
        data.examples.push_back(std::move(ex));
    }
    return data;
}

namespace {

// first token of a cue range found in a segment, or -1
int find_cue(const std::vector<int>& tokens, int base, size_t n) {
    for (int t : tokens) {
        if (t >= base && t < base + static_cast<int>(n)) return t - base;
    }
    return -1;
}

}  // namespace

double heuristic_accuracy(const Dataset& data, const TaskSpec& task, BiasFamily family,
                          int designated_label) {
    if (data.empty()) throw InputError("empty dataset");
    double correct = 0;
    for (const auto& ex : data.examples) {
        switch (family) {
            case BiasFamily::lexical: {
                int cue = find_cue(ex.b, task.lexical_base(), task.n_classes);
                correct += (cue == ex.label) ? 1.0 : 0.0;
                break;
            }
            case BiasFamily::partial_input: {
                int cue = find_cue(ex.b, task.marker_base(), task.n_classes);
                correct += (cue == ex.label) ? 1.0 : 0.0;
                break;
            }
            case BiasFamily::overlap: {
                if (overlap_fraction(ex) >= kOverlapThreshold) {
                    correct += (ex.label == designated_label) ? 1.0 : 0.0;
                } else if (ex.label != designated_label) {
                    // low overlap narrows the guess to the other classes
                    correct += 1.0 / static_cast<double>(task.n_classes - 1);
                }
                break;
            }
        }
    }
    return correct / static_cast<double>(data.size());
}

double measured_bias_agreement(const Dataset& data, const TaskSpec& task, BiasFamily family,
                               int designated_label) {
    if (data.empty()) throw InputError("empty dataset");
    size_t planted = 0, agreed = 0;
    for (const auto& ex : data.examples) {
        switch (family) {
            case BiasFamily::lexical: {
                int cue = find_cue(ex.b, task.lexical_base(), task.n_classes);
                if (cue >= 0) {
                    ++planted;
                    agreed += (cue == ex.label) ? 1 : 0;
                }
                break;
            }
            case BiasFamily::partial_input: {
                int cue = find_cue(ex.b, task.marker_base(), task.n_classes);
                if (cue >= 0) {
                    ++planted;
                    agreed += (cue == ex.label) ? 1 : 0;
                }
                break;
            }
            case BiasFamily::overlap: {
                // the overlap level is always readable, so agreement is
                // measured over every example
                ++planted;
                bool high = overlap_fraction(ex) >= kOverlapThreshold;
                agreed += (high == (ex.label == designated_label)) ? 1 : 0;
                break;
            }
        }
    }
    if (planted == 0) throw InputError("no example carries the " + family_name(family) + " cue");
    return static_cast<double>(agreed) / static_cast<double>(planted);
}

namespace {

// deterministic label rebalancing: keep the first min-count examples of
// each label, preserving order
Dataset balance_labels(std::vector<Example> kept) {
    std::map<int, size_t> counts;
    for (const auto& ex : kept) counts[ex.label]++;
    if (counts.empty()) return {};
    size_t floor_count = kept.size();
    for (const auto& [label, c] : counts) floor_count = std::min(floor_count, c);
    Dataset out;
    std::map<int, size_t> taken;
    for (auto& ex : kept) {
        if (taken[ex.label] < floor_count) {
            taken[ex.label]++;
            out.examples.push_back(std::move(ex));
        }
    }
    return out;
}

}  // namespace

Dataset filter_unbiased(const Dataset& data, size_t freq_threshold, double label_ratio_threshold,
                        UnbiasedFilterReport* report) {
    if (data.empty()) throw InputError("filter_unbiased on an empty dataset");
    // example-level presence counts per token and label
    std::unordered_map<int, std::unordered_map<int, size_t>> by_label;
    std::unordered_map<int, size_t> freq;
    for (const auto& ex : data.examples) {
        std::set<int> present(ex.a.begin(), ex.a.end());
        present.insert(ex.b.begin(), ex.b.end());
        for (int t : present) {
            ++freq[t];
            ++by_label[t][ex.label];
        }
    }
    std::set<int> flagged;
    for (const auto& [tok, f] : freq) {
        if (f < freq_threshold) continue;
        size_t majority = 0;
        for (const auto& [label, c] : by_label[tok]) majority = std::max(majority, c);
        double ratio = static_cast<double>(majority) / static_cast<double>(f);
        if (ratio >= label_ratio_threshold) flagged.insert(tok);
    }
    std::vector<Example> kept;
    for (const auto& ex : data.examples) {
        bool has_flagged = false;
        for (int t : ex.a) has_flagged = has_flagged || flagged.count(t);
        for (int t : ex.b) has_flagged = has_flagged || flagged.count(t);
        if (!has_flagged) kept.push_back(ex);
    }
    if (kept.empty()) {
        std::string toks;
        for (int t : flagged) toks += (toks.empty() ? "" : " ") + std::to_string(t);
        throw InputError("all examples contain biased tokens; flagged: " + toks);
    }
    Dataset out = balance_labels(std::move(kept));
    if (report) {
        report->flagged_tokens.assign(flagged.begin(), flagged.end());
        report->kept = out.size();
        report->removed = data.size() - out.size();
    }
    return out;
}

Dataset filter_hard(const Dataset& data, const Model& probe, size_t batch_size, bool balance,
                    HardFilterReport* report) {
    if (data.empty()) throw InputError("filter_hard on an empty dataset");
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    NoGradGuard guard;
    std::vector<Example> missed;
    std::set<int> seen_predictions;
    for (size_t from = 0; from < data.size(); from += batch_size) {
        size_t count = std::min(batch_size, data.size() - from);
        Batch batch = make_batch(data, from, count);
        Tensor logits = partial_input_forward(probe, batch);
        size_t C = logits.shape()[1];
        for (size_t r = 0; r < count; ++r) {
            size_t best = 0;
            for (size_t c = 1; c < C; ++c) {
                if (logits.values()[r * C + c] > logits.values()[r * C + best]) best = c;
            }
            seen_predictions.insert(static_cast<int>(best));
            if (static_cast<int>(best) != data.examples[from + r].label) {
                missed.push_back(data.examples[from + r]);
            }
        }
    }
    if (report) {
        report->misclassified = missed.size();
        report->degenerate_model = seen_predictions.size() <= 1;
    }
    Dataset out;
    if (balance) {
        out = balance_labels(std::move(missed));
    } else {
        out.examples = std::move(missed);
    }
    if (report) report->kept = out.size();
    return out;
}

Batch make_batch(const Dataset& data, const std::vector<size_t>& indices) {
    if (indices.empty()) throw InputError("empty batch request");
    size_t longest = 0;
    for (size_t i : indices) {
        if (i >= data.size()) throw IndexError("batch index out of range");
        const auto& ex = data.examples[i];
        longest = std::max(longest, ex.a.size() + ex.b.size() + 3);
    }
    Batch b;
    b.rows = indices.size();
    b.len = longest;
    b.tokens.assign(b.rows * longest, kPadId);
    b.segments.assign(b.rows * longest, 0);
    b.mask.assign(b.rows * longest, 0);
    b.labels.reserve(b.rows);
    for (size_t r = 0; r < b.rows; ++r) {
        const auto& ex = data.examples[indices[r]];
        std::vector<int> row;
        row.reserve(ex.a.size() + ex.b.size() + 3);
        row.push_back(kClsId);
        row.insert(row.end(), ex.a.begin(), ex.a.end());
        row.push_back(kSepId);
        size_t seg_b_from = row.size();
        row.insert(row.end(), ex.b.begin(), ex.b.end());
        row.push_back(kSepId);
        for (size_t j = 0; j < row.size(); ++j) {
            b.tokens[r * longest + j] = row[j];
            b.segments[r * longest + j] = j >= seg_b_from ? 1 : 0;
            b.mask[r * longest + j] = 1;
        }
        b.labels.push_back(ex.label);
    }
    return b;
}

Batch make_batch(const Dataset& data, size_t from, size_t count) {
    std::vector<size_t> idx(count);
    for (size_t i = 0; i < count; ++i) idx[i] = from + i;
    return make_batch(data, idx);
}

void write_jsonl(const Dataset& data, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open for writing: " + path);
    for (const auto& ex : data.examples) {
        nlohmann::json j;
        j["a"] = ex.a;
        j["b"] = ex.b;
        j["id"] = ex.id;
        j["label"] = ex.label;
        j["tags"] = ex.tags;
        f << j.dump() << '\n';
    }
    if (!f) throw InputError("write failed: " + path);
}

Dataset read_jsonl(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open for reading: " + path);
    Dataset data;
    std::string line;
    size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        Example ex;
        try {
            for (const char* field : {"a", "b", "id", "label", "tags"}) {
                if (!j.contains(field)) {
                    throw ParseError(path + ":" + std::to_string(line_no) +
                                     ": missing field '" + field + "'");
                }
            }
            ex.a = j["a"].get<std::vector<int>>();
            ex.b = j["b"].get<std::vector<int>>();
            ex.id = j["id"].get<int>();
            ex.label = j["label"].get<int>();
            ex.tags = j["tags"].get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        data.examples.push_back(std::move(ex));
    }
    return data;
}

nlohmann::json dataset_manifest(const Dataset& data, const TaskSpec& task, uint64_t seed) {
    nlohmann::json m;
    m["size"] = data.size();
    m["seed"] = seed;
    std::map<std::string, size_t> label_counts, tag_counts;
    for (const auto& ex : data.examples) {
        label_counts[std::to_string(ex.label)]++;
        for (const auto& t : ex.tags) tag_counts[t]++;
    }
    m["label_counts"] = label_counts;
    m["tag_counts"] = tag_counts;
    m["task"] = {{"vocab_size", task.vocab_size}, {"n_classes", task.n_classes},
                 {"n_keys", task.n_keys},         {"len_a", {task.len_a_min, task.len_a_max}},
                 {"len_b", {task.len_b_min, task.len_b_max}},
                 {"seed", task.seed},             {"table", task.table}};
    return m;
}

}  // namespace smoa
