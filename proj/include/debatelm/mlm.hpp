#pragma once

// Masked-language-model batch construction: packing, 80/10/10 masking, the two-phase
// sequence-length schedule and a deterministic batch stream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/error.hpp"
#include "debatelm/rng.hpp"
#include "debatelm/wordpiece.hpp"

namespace debatelm {

inline constexpr int kIgnoreLabel = -100;

struct PackingConfig {
    std::size_t max_len_phase1 = 128;
    std::size_t max_len_phase2 = 512;
    double phase1_fraction = 0.8;
    double mask_prob = 0.15;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0, 1)");
        if (!(phase1_fraction >= 0.0 && phase1_fraction <= 1.0)) throw ConfigError("phase1_fraction must lie in [0, 1]");
        if (max_len_phase1 < 2 || max_len_phase2 < 2) throw ConfigError("max sequence lengths must be at least 2");
    }
};

/// Replacement rule applied to positions selected for prediction.
struct MaskPolicy {
    double mask_fraction = 0.8;
    double random_fraction = 0.1;  // remainder keeps the original token
};

struct PackedSequence {
    std::vector<int> ids;  // length max_len, PAD-filled
    std::size_t length = 0;  // real positions including CLS/SEP
    std::size_t document = 0;
};

/// Greedy packing without crossing document boundaries: each document is chunked into
/// pieces of at most max_len - 2 tokens, each wrapped as CLS ... SEP and padded to max_len.
inline std::vector<PackedSequence> pack_sequences(std::span<const std::vector<int>> documents, std::size_t max_len) {
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    const std::size_t body = max_len - 2;
    std::vector<PackedSequence> out;
    for (std::size_t d = 0; d < documents.size(); ++d) {
        const auto& doc = documents[d];
        if (body == 0) {
            if (!doc.empty()) throw ConfigError("max_len 2 leaves no room for document tokens");
            continue;
        }
        for (std::size_t start = 0; start < doc.size(); start += body) {
            const std::size_t n = std::min(body, doc.size() - start);
            PackedSequence seq;
            seq.ids.assign(max_len, Special::pad);
            seq.ids[0] = Special::cls;
            std::copy_n(doc.begin() + static_cast<std::ptrdiff_t>(start), n, seq.ids.begin() + 1);
            seq.ids[n + 1] = Special::sep;
            seq.length = n + 2;
            seq.document = d;
            out.push_back(std::move(seq));
        }
    }
    return out;
}

struct MaskedRow {
    std::vector<int> input_ids;
    std::vector<int> labels;
    std::vector<int> attention_mask;
    std::vector<int> token_type;  // empty means all segment 0
};

/// Select each non-special position with probability mask_prob; selected positions become
/// MASK / a random non-special token / unchanged according to `policy`.
inline MaskedRow mask_tokens(std::span<const int> sequence, std::size_t vocab_size, double mask_prob, Rng& rng,
                             const MaskPolicy& policy = {}) {
    MaskedRow row;
    row.input_ids.assign(sequence.begin(), sequence.end());
    row.labels.assign(sequence.size(), kIgnoreLabel);
    row.attention_mask.resize(sequence.size());
    const std::uint64_t random_range = vocab_size > Special::count ? vocab_size - Special::count : 0;
    for (std::size_t i = 0; i < sequence.size(); ++i) {
        const int id = sequence[i];
        row.attention_mask[i] = id == Special::pad ? 0 : 1;
        if (Vocabulary::is_special(id) && id != Special::unk) continue;
        if (!(rng.uniform() < mask_prob)) continue;
        row.labels[i] = id;
        const double r = rng.uniform();
        if (r < policy.mask_fraction) {
            row.input_ids[i] = Special::mask;
        } else if (r < policy.mask_fraction + policy.random_fraction) {
            if (random_range > 0) row.input_ids[i] = Special::count + static_cast<int>(rng.below(random_range));
        }
    }
    return row;
}

/// Row-major (rows x cols) integer matrices; token_type distinguishes the segments of a pair.
struct MaskedBatch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<int> input_ids;
    std::vector<int> labels;
    std::vector<int> attention_mask;
    std::vector<int> token_type;

    int id(std::size_t r, std::size_t c) const { return input_ids[r * cols + c]; }
    std::size_t target_count() const {
        return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int l) { return l != kIgnoreLabel; }));
    }
};

/// Stack equal-length rows; with `trim`, trailing columns that are padding in every row
/// are dropped (attention never reads them, so the result is unchanged at real positions).
inline MaskedBatch make_batch(std::span<const MaskedRow> rows, bool trim = true) {
    MaskedBatch b;
    b.rows = rows.size();
    if (rows.empty()) return b;
    std::size_t width = rows.front().input_ids.size();
    for (const auto& r : rows)
        if (r.input_ids.size() != width) throw DataError("batch rows must have equal length");
    std::size_t used = trim ? 0 : width;
    if (trim)
        for (const auto& r : rows)
            for (std::size_t c = width; c > used; --c)
                if (r.attention_mask[c - 1] != 0) {
                    used = c;
                    break;
                }
    if (used == 0) used = std::min<std::size_t>(width, 1);
    b.cols = used;
    b.input_ids.reserve(b.rows * used);
    for (const auto& r : rows) {
        b.input_ids.insert(b.input_ids.end(), r.input_ids.begin(), r.input_ids.begin() + static_cast<std::ptrdiff_t>(used));
        b.labels.insert(b.labels.end(), r.labels.begin(), r.labels.begin() + static_cast<std::ptrdiff_t>(used));
        b.attention_mask.insert(b.attention_mask.end(), r.attention_mask.begin(),
                                r.attention_mask.begin() + static_cast<std::ptrdiff_t>(used));
        if (r.token_type.empty())
            b.token_type.insert(b.token_type.end(), used, 0);
        else
            b.token_type.insert(b.token_type.end(), r.token_type.begin(),
                                r.token_type.begin() + static_cast<std::ptrdiff_t>(used));
    }
    return b;
}

/// Right-pad rows to their common maximum width (PAD, sentinel label, mask 0, segment 0).
inline void pad_rows(std::vector<MaskedRow>& rows) {
    std::size_t width = 0;
    for (const auto& r : rows) width = std::max(width, r.input_ids.size());
    for (auto& r : rows) {
        if (!r.token_type.empty()) r.token_type.resize(width, 0);
        r.input_ids.resize(width, Special::pad);
        r.labels.resize(width, kIgnoreLabel);
        r.attention_mask.resize(width, 0);
    }
}

/// Number of steps that run at max_len_phase1: floor(phase1_fraction * total_steps).
inline std::size_t phase1_steps(std::size_t total_steps, double phase1_fraction) {
    return static_cast<std::size_t>(std::floor(phase1_fraction * static_cast<double>(total_steps)));
}

/// Max sequence length for 1-based `step`.
inline std::size_t phase_max_len(std::size_t step, std::size_t total_steps, const PackingConfig& cfg) {
    return step <= phase1_steps(total_steps, cfg.phase1_fraction) ? cfg.max_len_phase1 : cfg.max_len_phase2;
}

/// Tokenize documents (normalized + WordPiece) into id streams.
inline std::vector<std::vector<int>> tokenize_documents(const Corpus& corpus, const Vocabulary& vocab) {
    std::vector<std::vector<int>> out;
    out.reserve(corpus.documents.size());
    for (const auto& d : corpus.documents) out.push_back(encode(d.text, vocab).token_ids);
    return out;
}

struct BatchOrigin {
    std::size_t step = 0;
    std::size_t phase = 0;
    std::size_t epoch = 0;
    std::vector<std::size_t> sequence_indices;
};

/// Deterministic stream of masked batches for pre-training.  Sequences of each phase are
/// visited in a per-epoch seeded permutation; masks are drawn fresh per (epoch, sequence),
/// so masking is dynamic yet reproducible.
class MlmBatchStream {
public:
    MlmBatchStream(const std::vector<std::vector<int>>& documents, std::size_t vocab_size, PackingConfig cfg,
                   std::size_t batch_size, std::size_t total_steps, MaskPolicy policy = {})
        : cfg_(cfg), policy_(policy), vocab_size_(vocab_size), batch_size_(batch_size), total_steps_(total_steps) {
        cfg_.validate();
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        phases_[0].sequences = pack_sequences(documents, cfg_.max_len_phase1);
        phases_[1].sequences = pack_sequences(documents, cfg_.max_len_phase2);
        if (phases_[0].sequences.empty()) throw DataError("no training sequences (empty tokenized corpus)");
    }

    /// Batch for 1-based `step`.  Steps must be requested in increasing order.
    MaskedBatch next(std::size_t step, BatchOrigin* origin = nullptr) {
        const std::size_t phase = step <= phase1_steps(total_steps_, cfg_.phase1_fraction) ? 0 : 1;
        auto& ph = phases_[phase];
        std::vector<MaskedRow> rows;
        rows.reserve(batch_size_);
        if (origin) {
            origin->step = step;
            origin->phase = phase;
            origin->sequence_indices.clear();
        }
        for (std::size_t b = 0; b < batch_size_; ++b) {
            if (ph.cursor == ph.order.size()) {
                if (!ph.order.empty()) ++ph.epoch;
                ph.order.resize(ph.sequences.size());
                for (std::size_t i = 0; i < ph.order.size(); ++i) ph.order[i] = i;
                Rng shuffle_rng(stream_seed(cfg_.seed, "sampling", {phase, ph.epoch}));
                shuffle_rng.shuffle(ph.order);
                ph.cursor = 0;
            }
            const std::size_t idx = ph.order[ph.cursor++];
            Rng mask_rng(stream_seed(cfg_.seed, "mask", {phase, ph.epoch, idx}));
            rows.push_back(mask_tokens(ph.sequences[idx].ids, vocab_size_, cfg_.mask_prob, mask_rng, policy_));
            if (origin) {
                origin->epoch = ph.epoch;
                origin->sequence_indices.push_back(idx);
            }
        }
        return make_batch(rows);
    }

    std::size_t max_len_for_step(std::size_t step) const { return phase_max_len(step, total_steps_, cfg_); }
    const std::vector<PackedSequence>& sequences(std::size_t phase) const { return phases_[phase].sequences; }

private:
    struct Phase {
        std::vector<PackedSequence> sequences;
        std::vector<std::size_t> order;
        std::size_t cursor = 0;
        std::size_t epoch = 0;
    };
    PackingConfig cfg_;
    MaskPolicy policy_;
    std::size_t vocab_size_;
    std::size_t batch_size_;
    std::size_t total_steps_;
    Phase phases_[2];
};

/// Fixed-mask evaluation batches over every packed sequence (used for held-out perplexity).
inline std::vector<MaskedBatch> evaluation_batches(const std::vector<std::vector<int>>& documents,
                                                   std::size_t vocab_size, std::size_t max_len, double mask_prob,
                                                   std::uint64_t seed, std::size_t batch_size) {
    const auto seqs = pack_sequences(documents, max_len);
    std::vector<MaskedBatch> out;
    std::vector<MaskedRow> rows;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        Rng rng(stream_seed(seed, "eval-mask", {i}));
        rows.push_back(mask_tokens(seqs[i].ids, vocab_size, mask_prob, rng));
        if (rows.size() == batch_size || i + 1 == seqs.size()) {
            out.push_back(make_batch(rows));
            rows.clear();
        }
    }
    return out;
}

/// One batch-cache record: the three matrices plus the seed tuple that generated them.
inline nlohmann::json batch_record(const MaskedBatch& b, std::uint64_t seed, const BatchOrigin& origin) {
    auto matrix = [&](const std::vector<int>& v) {
        nlohmann::json m = nlohmann::json::array();
        for (std::size_t r = 0; r < b.rows; ++r)
            m.push_back(std::vector<int>(v.begin() + static_cast<std::ptrdiff_t>(r * b.cols),
                                         v.begin() + static_cast<std::ptrdiff_t>((r + 1) * b.cols)));
        return m;
    };
    return {{"seed", seed},
            {"step", origin.step},
            {"phase", origin.phase},
            {"epoch", origin.epoch},
            {"sequence_indices", origin.sequence_indices},
            {"input_ids", matrix(b.input_ids)},
            {"labels", matrix(b.labels)},
            {"attention_mask", matrix(b.attention_mask)}};
}

}  // namespace debatelm
