#pragma once

// Synthetic sequence-pair classification tasks with plantable shortcuts.
// The ground truth is a compositional rule: each segment carries one key
// token, and a doubly label-balanced lookup table maps the key pair to the
// class. Because the table is balanced along both axes, neither key alone
// carries any label information — every shortcut a model finds beyond the
// pair rule is one we planted.
//
// Three shortcut families are supported:
//   lexical       — a cue token inserted into segment B, where annotation
//                   artifacts concentrate in the pairs it imitates
//   partial_input — a cue token inserted into segment B only
//   overlap       — segment B mostly repeats segment A's tokens (high
//                   overlap) as the cue for one designated label, and
//                   repeats only a couple of them otherwise
//
// High-overlap segments repeat all of A's fillers (minus an optional
// substitution fraction) plus one fresh distractor; low-overlap segments in
// cue-covered pairs carry one shared and one fresh filler. The repetition
// must be blatant: the cue has to be cheap enough for an encoder to pick up
// in the first epoch, before the pair rule forms, or it never wins the
// shortcut competition. Both regimes touch the same number of distinct
// fillers per example (all of A's plus one), so no filler's label ratio
// drifts toward either side of the cue and the label-statistics filter
// stays blind to the construction; the leftover surface difference is
// segment-B length, which per-token statistics cannot see.

#include "smoa/encoder.hpp"
#include "smoa/error.hpp"
#include "smoa/rng.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace smoa {

struct TaskSpec {
    size_t vocab_size = 200;
    size_t n_classes = 3;
    // Short segments and a 6x6 key table keep the pair rule learnable for a
    // small encoder: in long filler runs the key tokens drown under the
    // near-uniform attention of early training and the model never escapes
    // the cue-only plateau. Keys per side must stay a multiple of the class
    // count so every table row and column is label-balanced, or the key
    // tokens themselves would trip the label-statistics filter.
    size_t n_keys = 6;  // keys per segment side
    size_t len_a_min = 3, len_a_max = 4;  // segment tokens incl. key, before cue insertion
    size_t len_b_min = 3, len_b_max = 4;
    // Filler pool size. Deliberately smaller than the space left in the
    // vocabulary: higher per-token frequency concentrates the label ratio
    // of unbiased tokens, keeping them clear of the filter threshold.
    size_t n_fillers = 100;
    uint64_t seed = 1;
    std::vector<int> table;  // n_keys*n_keys entries in [0, n_classes)

    // vocabulary layout: [PAD CLS SEP MASK] [A keys] [B keys] [cue tokens A]
    // [cue tokens B] [fillers...]
    int a_key_base() const { return 4; }
    int b_key_base() const { return 4 + static_cast<int>(n_keys); }
    int lexical_base() const { return 4 + 2 * static_cast<int>(n_keys); }
    int marker_base() const { return lexical_base() + static_cast<int>(n_classes); }
    int filler_base() const { return marker_base() + static_cast<int>(n_classes); }
    int label_of(size_t key_a, size_t key_b) const;
};

// Builds a TaskSpec whose lookup table is balanced per row and per column
// (every key co-occurs with every label equally often), then randomized by
// balance-preserving 2x2 swaps so the rule is not additive.
TaskSpec make_task(uint64_t seed);
TaskSpec make_task(TaskSpec base);  // fills in the table, validates layout

enum class BiasFamily { lexical, partial_input, overlap };

std::string family_name(BiasFamily family);
BiasFamily family_from_name(const std::string& name);

struct BiasSpec {
    BiasFamily family = BiasFamily::lexical;
    double strength = 0.95;  // P(cue agrees with the label | cue planted)
    double coverage = 1.0;   // P(cue planted at all)
    // overlap-family parameters
    int designated_label = 0;    // high overlap cues this label
    double substitution = 0.0;  // distractor rate among copied tokens, capped so the
                                // copy stays above the overlap threshold; 0 keeps the
                                // copy exact, which is what makes the cue salient.
                                // Nonzero values erode the distinct-filler balance
                                // between high and low pairs (each substituted copy
                                // adds one distinct filler to a high example), which
                                // pushes filler label ratios toward the filter
                                // threshold at small corpus sizes.
};

struct Example {
    int id = 0;
    std::vector<int> a, b;
    int label = 0;
    std::vector<std::string> tags;  // shortcut families that agree; else {"clean"}
};

struct Dataset {
    std::vector<Example> examples;
    size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

// |set(a) ∩ set(b)| / |set(a)| — the overlap statistic used by both the
// generator and the overlap heuristic. 0.5 separates the two regimes.
double overlap_fraction(const Example& ex);
constexpr double kOverlapThreshold = 0.5;

// Balanced biased split: every requested shortcut is planted to agree with
// the label with probability = its strength.
Dataset gen_dataset(const TaskSpec& task, const std::vector<BiasSpec>& biases, size_t size,
                    uint64_t seed);

// Anti-correlated split for one shortcut family: the cue is always planted
// and always points at a wrong label, so cue-following accuracy is 0 while
// the key-pair rule still recovers every label.
Dataset gen_challenge(const TaskSpec& task, const BiasSpec& bias, size_t size, uint64_t seed);

// Accuracy of following the named shortcut on a dataset (cue-token or
// overlap-level reading). Examples without the cue count as wrong.
double heuristic_accuracy(const Dataset& data, const TaskSpec& task, BiasFamily family,
                          int designated_label = 0);

// Fraction of cue-planted examples whose cue agrees with the label.
double measured_bias_agreement(const Dataset& data, const TaskSpec& task, BiasFamily family,
                               int designated_label = 0);

struct UnbiasedFilterReport {
    std::vector<int> flagged_tokens;
    size_t removed = 0;
    size_t kept = 0;
};

// Removes every example containing a token whose example-frequency is at
// least freq_threshold and whose majority-label ratio is at least
// label_ratio_threshold; the survivors are label-rebalanced by
// deterministic downsampling.
Dataset filter_unbiased(const Dataset& data, size_t freq_threshold = 3,
                        double label_ratio_threshold = 0.385,
                        UnbiasedFilterReport* report = nullptr);

struct HardFilterReport {
    size_t misclassified = 0;
    size_t kept = 0;
    bool degenerate_model = false;  // the probe predicted one class everywhere
};

// Keeps the examples the segment-B-only view of `probe` misclassifies,
// label-rebalanced by deterministic downsampling (disable with balance).
Dataset filter_hard(const Dataset& data, const Model& probe, size_t batch_size = 128,
                    bool balance = true, HardFilterReport* report = nullptr);

// Batching: [CLS] a [SEP] b [SEP], segment ids 0/0.../0 1.../1, padded to
// the longest row in the batch.
Batch make_batch(const Dataset& data, const std::vector<size_t>& indices);
Batch make_batch(const Dataset& data, size_t from, size_t count);

// JSONL persistence: one object per line with fields a, b, id, label, tags.
void write_jsonl(const Dataset& data, const std::string& path);
Dataset read_jsonl(const std::string& path);

// Split manifest: label/tag counts, generator seed, task echo.
nlohmann::json dataset_manifest(const Dataset& data, const TaskSpec& task, uint64_t seed);

}  // namespace smoa
