#pragma once

// WordPiece vocabulary: normalization, pre-tokenization, likelihood-scored merge
// training, greedy longest-match encoding, decoding and vocabulary analytics.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "debatelm/corpus.hpp"
#include "debatelm/error.hpp"
#include "debatelm/hash.hpp"
#include "debatelm/unicode.hpp"

namespace debatelm {

enum class Casing { cased, uncased };

inline std::string_view to_string(Casing c) { return c == Casing::cased ? "cased" : "uncased"; }

inline Casing parse_casing(std::string_view s) {
    if (s == "cased") return Casing::cased;
    if (s == "uncased") return Casing::uncased;
    throw ConfigError("casing must be 'cased' or 'uncased', got '" + std::string(s) + "'");
}

/// Fixed special-token ids.
struct Special {
    static constexpr int pad = 0;
    static constexpr int unk = 1;
    static constexpr int cls = 2;
    static constexpr int sep = 3;
    static constexpr int mask = 4;
    static constexpr int count = 5;
};

inline constexpr std::array<std::string_view, Special::count> kSpecialTokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                                                "[MASK]"};
inline constexpr std::string_view kContinuationPrefix = "##";
inline constexpr std::size_t kMaxWordChars = 100;

class Vocabulary {
public:
    Vocabulary() = default;

    /// Validates uniqueness and the special-token layout.
    Vocabulary(std::vector<std::string> tokens, Casing casing) : tokens_(std::move(tokens)), casing_(casing) {
        if (tokens_.size() < Special::count) throw DataError("vocabulary smaller than the special-token block");
        for (int i = 0; i < Special::count; ++i)
            if (tokens_[static_cast<std::size_t>(i)] != kSpecialTokens[static_cast<std::size_t>(i)])
                throw DataError("vocabulary index " + std::to_string(i) + " must be " +
                                std::string(kSpecialTokens[static_cast<std::size_t>(i)]));
        index_.reserve(tokens_.size());
        for (std::size_t i = 0; i < tokens_.size(); ++i) {
            if (tokens_[i].empty()) throw DataError("empty token at line " + std::to_string(i + 1));
            if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
                throw DataError("duplicate token '" + tokens_[i] + "'");
        }
    }

    static Vocabulary load(const std::filesystem::path& path, Casing casing) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open vocabulary " + path.string());
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            tokens.push_back(line);
        }
        return Vocabulary(std::move(tokens), casing);
    }

    /// One token per line; line index = token id.
    std::string to_text() const {
        std::string out;
        for (const auto& t : tokens_) {
            out += t;
            out += '\n';
        }
        return out;
    }

    void save(const std::filesystem::path& path) const { write_file_atomic(path, to_text()); }

    std::string hash() const { return git_blob_hash(std::string(to_string(casing_)) + "\n" + to_text()); }

    std::size_t size() const { return tokens_.size(); }
    Casing casing() const { return casing_; }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
            throw DataError("token id " + std::to_string(id) + " out of range for vocabulary of size " +
                            std::to_string(tokens_.size()));
        return tokens_[static_cast<std::size_t>(id)];
    }
    std::optional<int> id(const std::string& token) const {
        const auto it = index_.find(token);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }
    bool contains(const std::string& token) const { return index_.count(token) != 0; }
    static bool is_special(int id) { return id >= 0 && id < Special::count; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    Casing casing_ = Casing::uncased;
};

/// Control characters removed; uncased additionally lowercases and strips accents.
inline std::string normalize(std::string_view text, Casing casing) {
    std::string s = unicode::remove_control(text);
    if (casing == Casing::cased) return unicode::nfc(s);
    return unicode::nfc(unicode::lower_strip_accents(s));
}

struct Word {
    std::string text;
    std::size_t begin = 0;  // byte offsets into the normalized text
    std::size_t end = 0;
};

/// Split on whitespace; each punctuation character is its own word.
inline std::vector<Word> pretokenize(std::string_view normalized) {
    std::vector<Word> words;
    std::size_t i = 0;
    std::size_t word_begin = std::string_view::npos;
    auto flush = [&](std::size_t end) {
        if (word_begin != std::string_view::npos) {
            words.push_back({std::string(normalized.substr(word_begin, end - word_begin)), word_begin, end});
            word_begin = std::string_view::npos;
        }
    };
    while (i < normalized.size()) {
        const std::size_t start = i;
        const auto cp = unicode::next_code_point(normalized, i);
        if (cp < 0) throw DataError("invalid UTF-8 input");
        if (unicode::is_whitespace(cp)) {
            flush(start);
        } else if (unicode::is_punctuation(cp)) {
            flush(start);
            words.push_back({std::string(normalized.substr(start, i - start)), start, i});
        } else if (word_begin == std::string_view::npos) {
            word_begin = start;
        }
    }
    flush(normalized.size());
    return words;
}

struct Encoding {
    std::vector<int> token_ids;
    std::vector<std::string> tokens;
    std::vector<std::pair<std::size_t, std::size_t>> offsets;  // byte spans into the normalized text

    std::size_t size() const { return token_ids.size(); }
};

namespace detail {

inline void encode_word(const Word& word, const Vocabulary& vocab, Encoding& out) {
    auto emit_unk = [&] {
        out.token_ids.push_back(Special::unk);
        out.tokens.emplace_back(kSpecialTokens[Special::unk]);
        out.offsets.emplace_back(word.begin, word.end);
    };
    if (unicode::code_point_count(word.text) > kMaxWordChars) {
        emit_unk();
        return;
    }
    // Code-point boundaries of the word, so candidate pieces never split a character.
    std::vector<std::size_t> bounds;
    for (std::size_t i = 0; i < word.text.size();) {
        bounds.push_back(i);
        unicode::next_code_point(word.text, i);
    }
    bounds.push_back(word.text.size());

    const std::size_t first = out.token_ids.size();
    std::size_t start = 0;  // index into bounds
    std::string candidate;
    while (start + 1 < bounds.size()) {
        bool found = false;
        for (std::size_t end = bounds.size() - 1; end > start; --end) {
            candidate.clear();
            if (start > 0) candidate = kContinuationPrefix;
            candidate.append(word.text, bounds[start], bounds[end] - bounds[start]);
            if (const auto id = vocab.id(candidate)) {
                out.token_ids.push_back(*id);
                out.tokens.push_back(candidate);
                out.offsets.emplace_back(word.begin + bounds[start], word.begin + bounds[end]);
                start = end;
                found = true;
                break;
            }
        }
        if (!found) {
            out.token_ids.resize(first);
            out.tokens.resize(first);
            out.offsets.resize(first);
            emit_unk();
            return;
        }
    }
}

}  // namespace detail

/// Greedy longest-match-first WordPiece over already-normalized text.
inline Encoding encode_normalized(std::string_view normalized, const Vocabulary& vocab) {
    Encoding enc;
    for (const auto& word : pretokenize(normalized)) detail::encode_word(word, vocab, enc);
    return enc;
}

inline Encoding encode(std::string_view text, const Vocabulary& vocab) {
    return encode_normalized(normalize(text, vocab.casing()), vocab);
}

/// Token pieces of a single word (used by the fragmentation report and the task loaders).
inline std::vector<std::string> word_pieces(std::string_view word, const Vocabulary& vocab) {
    return encode(word, vocab).tokens;
}

/// Join pieces back into text.  Specials are elided.  When offsets are present, the gap
/// between consecutive pieces is restored as spaces; otherwise a space precedes every
/// word-initial piece.
inline std::string decode(const Encoding& encoding, const Vocabulary& vocab) {
    const bool have_offsets = encoding.offsets.size() == encoding.token_ids.size();
    std::string out;
    std::optional<std::size_t> prev_end;
    for (std::size_t i = 0; i < encoding.token_ids.size(); ++i) {
        const int id = encoding.token_ids[i];
        const std::string& tok = vocab.token(id);
        if (Vocabulary::is_special(id) && id != Special::unk) continue;
        const bool continuation = tok.starts_with(kContinuationPrefix);
        std::string_view piece = continuation ? std::string_view(tok).substr(kContinuationPrefix.size()) : tok;
        if (have_offsets) {
            const auto [b, e] = encoding.offsets[i];
            if (prev_end && b > *prev_end) out.append(b - *prev_end, ' ');
            prev_end = e;
        } else if (!out.empty() && !continuation) {
            out.push_back(' ');
        }
        out.append(piece);
    }
    return out;
}

inline std::string decode(std::span<const int> ids, const Vocabulary& vocab) {
    Encoding enc;
    enc.token_ids.assign(ids.begin(), ids.end());
    return decode(enc, vocab);
}

/// |tokens(a) ∩ tokens(b)| / |tokens(a)|.
inline double vocab_overlap(const Vocabulary& a, const Vocabulary& b) {
    if (a.size() == 0) return 0.0;
    std::size_t shared = 0;
    for (const auto& t : a.tokens()) shared += b.contains(t) ? 1 : 0;
    return static_cast<double>(shared) / static_cast<double>(a.size());
}

struct TrainStats {
    std::size_t alphabet_size = 0;
    std::size_t merges = 0;
    bool exhausted = false;  // no pairs left before the budget was reached
    std::size_t distinct_words = 0;
};

namespace detail {

struct PairCandidate {
    int left = -1;
    int right = -1;
    std::uint64_t pair_freq = 0;
    std::uint64_t left_freq = 0;
    std::uint64_t right_freq = 0;
};

// pair_freq / (left_freq * right_freq) compared exactly in integers.
inline int compare_scores(const PairCandidate& a, const PairCandidate& b) {
    using u128 = unsigned __int128;
    const u128 lhs = static_cast<u128>(a.pair_freq) * b.left_freq * b.right_freq;
    const u128 rhs = static_cast<u128>(b.pair_freq) * a.left_freq * a.right_freq;
    return lhs < rhs ? -1 : (lhs > rhs ? 1 : 0);
}

inline std::string merged_token(const std::string& left, const std::string& right) {
    if (right.starts_with(kContinuationPrefix)) return left + right.substr(kContinuationPrefix.size());
    return left + right;
}

}  // namespace detail

/// Word frequencies over normalized, pre-tokenized texts (words over the length cap skipped).
template <class Texts>
std::map<std::string, std::uint64_t> count_words(const Texts& texts, Casing casing) {
    std::map<std::string, std::uint64_t> counts;
    for (const auto& text : texts)
        for (auto& w : pretokenize(normalize(text, casing)))
            if (unicode::code_point_count(w.text) <= kMaxWordChars) ++counts[std::move(w.text)];
    return counts;
}

/// Bottom-up WordPiece training from word counts.  Repeatedly merges the adjacent pair with
/// the highest freq(pair) / (freq(left) * freq(right)); ties go to the lexicographically
/// smallest merged token.  Stops at `budget` tokens or when no pair remains.
inline Vocabulary train_vocabulary(const std::map<std::string, std::uint64_t>& word_counts, std::size_t budget,
                                   Casing casing, TrainStats* stats = nullptr) {
    std::vector<std::string> symbols;
    std::unordered_map<std::string, int> symbol_id;
    auto intern = [&](const std::string& s) {
        auto [it, inserted] = symbol_id.emplace(s, static_cast<int>(symbols.size()));
        if (inserted) symbols.push_back(s);
        return it->second;
    };

    std::set<std::string> initial, continuation;
    for (const auto& [word, count] : word_counts) {
        std::size_t i = 0;
        bool first = true;
        while (i < word.size()) {
            const std::size_t start = i;
            unicode::next_code_point(word, i);
            const std::string ch = word.substr(start, i - start);
            (first ? initial : continuation).insert(first ? ch : std::string(kContinuationPrefix) + ch);
            first = false;
        }
    }
    const std::size_t minimum = Special::count + initial.size() + continuation.size();
    if (budget < minimum)
        throw ConfigError("vocabulary budget " + std::to_string(budget) + " is below the alphabet; minimum feasible budget is " +
                          std::to_string(minimum));

    std::vector<std::string> vocab_tokens(kSpecialTokens.begin(), kSpecialTokens.end());
    for (const auto& t : vocab_tokens) intern(t);
    for (const auto& t : initial) vocab_tokens.push_back(t), intern(t);
    for (const auto& t : continuation) vocab_tokens.push_back(t), intern(t);

    struct WordState {
        std::vector<int> pieces;
        std::uint64_t count;
    };
    std::vector<WordState> words;
    words.reserve(word_counts.size());
    for (const auto& [word, count] : word_counts) {
        WordState ws{{}, count};
        std::size_t i = 0;
        bool first = true;
        while (i < word.size()) {
            const std::size_t start = i;
            unicode::next_code_point(word, i);
            std::string ch = word.substr(start, i - start);
            ws.pieces.push_back(intern(first ? ch : std::string(kContinuationPrefix) + ch));
            first = false;
        }
        words.push_back(std::move(ws));
    }

    TrainStats local;
    local.alphabet_size = initial.size() + continuation.size();
    local.distinct_words = words.size();

    std::unordered_map<std::uint64_t, std::uint64_t> pair_freq;
    std::vector<std::uint64_t> token_freq;
    auto key = [](int a, int b) { return (static_cast<std::uint64_t>(a) << 32) | static_cast<std::uint32_t>(b); };

    while (vocab_tokens.size() < budget) {
        pair_freq.clear();
        token_freq.assign(symbols.size(), 0);
        for (const auto& w : words) {
            for (std::size_t i = 0; i < w.pieces.size(); ++i) {
                token_freq[static_cast<std::size_t>(w.pieces[i])] += w.count;
                if (i + 1 < w.pieces.size()) pair_freq[key(w.pieces[i], w.pieces[i + 1])] += w.count;
            }
        }
        if (pair_freq.empty()) {
            local.exhausted = true;
            break;
        }
        detail::PairCandidate best;
        std::string best_merged;
        for (const auto& [k, f] : pair_freq) {
            detail::PairCandidate c{static_cast<int>(k >> 32), static_cast<int>(k & 0xffffffffu), f,
                                    token_freq[k >> 32], token_freq[k & 0xffffffffu]};
            int cmp = best.left < 0 ? 1 : detail::compare_scores(c, best);
            if (cmp < 0) continue;
            std::string merged = detail::merged_token(symbols[static_cast<std::size_t>(c.left)],
                                                      symbols[static_cast<std::size_t>(c.right)]);
            if (cmp == 0) {
                if (merged > best_merged) continue;
                if (merged == best_merged &&
                    std::tie(symbols[static_cast<std::size_t>(c.left)], symbols[static_cast<std::size_t>(c.right)]) >=
                        std::tie(symbols[static_cast<std::size_t>(best.left)],
                                 symbols[static_cast<std::size_t>(best.right)]))
                    continue;
            }
            best = c;
            best_merged = std::move(merged);
        }
        const bool is_new = !symbol_id.count(best_merged);
        const int merged_id = intern(best_merged);
        if (is_new) vocab_tokens.push_back(best_merged);
        ++local.merges;
        for (auto& w : words) {
            auto& p = w.pieces;
            std::size_t out = 0;
            for (std::size_t i = 0; i < p.size(); ++i) {
                if (i + 1 < p.size() && p[i] == best.left && p[i + 1] == best.right) {
                    p[out++] = merged_id;
                    ++i;
                } else {
                    p[out++] = p[i];
                }
            }
            p.resize(out);
        }
    }
    if (stats) *stats = local;
    return Vocabulary(std::move(vocab_tokens), casing);
}

inline Vocabulary train_vocabulary(const Corpus& corpus, std::size_t budget, Casing casing,
                                   TrainStats* stats = nullptr) {
    std::vector<std::string_view> texts;
    texts.reserve(corpus.documents.size());
    for (const auto& d : corpus.documents) texts.emplace_back(d.text);
    return train_vocabulary(count_words(texts, casing), budget, casing, stats);
}

struct FragmentationRow {
    std::string word;
    std::string vocab_name;
    std::vector<std::string> pieces;
    std::size_t piece_count() const { return pieces.size(); }
};

struct NamedVocabulary {
    std::string name;
    const Vocabulary* vocab;
};

inline std::vector<FragmentationRow> fragmentation_report(const std::vector<std::string>& words,
                                                          const std::vector<NamedVocabulary>& vocabs) {
    std::vector<FragmentationRow> rows;
    for (const auto& w : words)
        for (const auto& v : vocabs) rows.push_back({w, v.name, word_pieces(w, *v.vocab)});
    return rows;
}

namespace detail {
inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}
}  // namespace detail

/// CSV columns: word, vocab_name, pieces (space separated), piece_count.
inline std::string fragmentation_csv(const std::vector<FragmentationRow>& rows) {
    std::string out = "word,vocab_name,pieces,piece_count\n";
    for (const auto& r : rows) {
        std::string joined;
        for (std::size_t i = 0; i < r.pieces.size(); ++i) {
            if (i) joined += ' ';
            joined += r.pieces[i];
        }
        out += detail::csv_field(r.word) + ',' + detail::csv_field(r.vocab_name) + ',' + detail::csv_field(joined) +
               ',' + std::to_string(r.piece_count()) + '\n';
    }
    return out;
}

}  // namespace debatelm
