#pragma once

// Debate corpus ingestion: cleaning, loading, and the per-source 90/10/1 split.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/error.hpp"
#include "debatelm/hash.hpp"
#include "debatelm/rng.hpp"
#include "debatelm/unicode.hpp"

namespace debatelm {

struct Document {
    std::string id;
    std::string source;
    std::optional<std::string> date;
    std::string text;
};

struct Corpus {
    std::vector<Document> documents;
    std::map<std::string, std::size_t> source_manifest;
    std::size_t dropped_empty = 0;

    bool empty() const { return documents.empty(); }
    std::size_t size() const { return documents.size(); }
    std::vector<std::string> sources() const {
        std::vector<std::string> out;
        for (const auto& [s, n] : source_manifest) out.push_back(s);
        return out;
    }
};

struct SplitAssignment {
    std::uint64_t seed = 0;
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
    std::vector<std::string> ppl_holdout_ids;
    std::vector<std::string> warnings;
};

namespace detail {

// Leftmost `<[^>]+>` spans.
inline std::string strip_tags(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        if (s[i] == '<') {
            const auto close = s.find('>', i + 1);
            if (close != std::string_view::npos && close > i + 1) {
                i = close + 1;
                continue;
            }
        }
        out.push_back(s[i++]);
    }
    return out;
}

inline bool ascii_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

// `https?://\S+` spans.
inline std::string strip_urls(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t scheme = 0;
        if (s.compare(i, 7, "http://") == 0) scheme = 7;
        else if (s.compare(i, 8, "https://") == 0) scheme = 8;
        if (scheme != 0 && i + scheme < s.size() && !ascii_space(s[i + scheme])) {
            i += scheme;
            while (i < s.size() && !ascii_space(s[i])) ++i;
            continue;
        }
        out.push_back(s[i++]);
    }
    return out;
}

// Map every Unicode whitespace run to one ASCII space and trim.
inline std::string collapse_whitespace(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    std::size_t i = 0;
    while (i < s.size()) {
        const std::size_t start = i;
        const auto cp = unicode::next_code_point(s, i);
        if (cp < 0) throw DataError("invalid UTF-8 input");
        if (unicode::is_whitespace(cp)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.append(s.substr(start, i - start));
    }
    return out;
}

}  // namespace detail

/// Remove markup tags and URLs, apply optional drop patterns, collapse whitespace, trim.
/// Removal repeats to a fixed point so that clean_text is idempotent.
inline std::string clean_text(std::string_view raw, const std::vector<std::regex>& drop_patterns = {}) {
    std::string text(raw);
    for (;;) {
        std::string next = text;
        for (const auto& re : drop_patterns) next = std::regex_replace(next, re, "");
        next = detail::strip_urls(detail::strip_tags(next));
        if (next == text) break;
        text = std::move(next);
    }
    return detail::collapse_whitespace(text);
}

/// Accumulates raw documents into a Corpus, applying NFC + cleaning and dropping empties.
class CorpusBuilder {
public:
    explicit CorpusBuilder(std::vector<std::regex> drop_patterns = {}) : drop_patterns_(std::move(drop_patterns)) {}

    void add(std::string id, std::string source, std::optional<std::string> date, std::string_view raw) {
        if (id.empty()) throw DataError("document without id");
        if (!ids_.insert(id).second) throw DataError("duplicate document id '" + id + "'");
        if (!unicode::valid_utf8(raw)) throw DataError("document '" + id + "' is not valid UTF-8");
        std::string text = clean_text(unicode::nfc(raw), drop_patterns_);
        if (text.empty()) {
            ++corpus_.dropped_empty;
            return;
        }
        ++corpus_.source_manifest[source];
        corpus_.documents.push_back({std::move(id), std::move(source), std::move(date), std::move(text)});
    }

    Corpus finish() && { return std::move(corpus_); }

private:
    std::vector<std::regex> drop_patterns_;
    std::unordered_set<std::string> ids_;
    Corpus corpus_;
};

inline void to_json(nlohmann::json& j, const Document& d) {
    j = {{"id", d.id}, {"source", d.source}, {"text", d.text}};
    j["date"] = d.date ? nlohmann::json(*d.date) : nlohmann::json(nullptr);
}

/// JSONL with fields {id, source, date, text}; one document per line.
inline Corpus load_jsonl(const std::filesystem::path& path, const std::vector<std::regex>& drop_patterns = {}) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    CorpusBuilder builder(drop_patterns);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.contains("id") || !j.contains("text"))
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing id or text");
        std::optional<std::string> date;
        if (j.contains("date") && j["date"].is_string()) date = j["date"].get<std::string>();
        const std::string source = j.value("source", std::string("default"));
        builder.add(j["id"].get<std::string>(), source, date, j["text"].get<std::string>());
    }
    return std::move(builder).finish();
}

/// Directory of .txt files, one document each.  Files in a subdirectory take that
/// subdirectory's name as their source; top-level files use the directory name.
inline Corpus load_text_dir(const std::filesystem::path& dir, const std::vector<std::regex>& drop_patterns = {}) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    CorpusBuilder builder(drop_patterns);
    const std::string root_name = fs::absolute(dir).lexically_normal().filename().string();
    for (const auto& f : files) {
        const auto rel = fs::relative(f, dir);
        const std::string source = rel.has_parent_path() ? rel.begin()->string() : root_name;
        std::string id = rel.generic_string();
        id = id.substr(0, id.size() - 4);
        builder.add(std::move(id), source, std::nullopt, read_file(f));
    }
    return std::move(builder).finish();
}

inline Corpus load_corpus(const std::filesystem::path& input, const std::vector<std::regex>& drop_patterns = {}) {
    if (std::filesystem::is_directory(input)) return load_text_dir(input, drop_patterns);
    return load_jsonl(input, drop_patterns);
}

inline std::string corpus_to_jsonl(const Corpus& corpus) {
    std::string out;
    for (const auto& d : corpus.documents) {
        out += nlohmann::json(d).dump();
        out += '\n';
    }
    return out;
}

/// Per-source stratified split: ~10% of each source goes to test (rounded half up), then
/// 1% of that test portion moves to the perplexity hold-out.  Deterministic in `seed`.
inline SplitAssignment split_corpus(const Corpus& corpus, std::uint64_t seed) {
    if (corpus.empty()) throw DataError("cannot split an empty corpus");
    std::map<std::string, std::vector<std::string>> by_source;
    for (const auto& d : corpus.documents) by_source[d.source].push_back(d.id);

    SplitAssignment split;
    split.seed = seed;
    for (auto& [source, ids] : by_source) {
        std::sort(ids.begin(), ids.end());
        if (ids.size() < 2) {
            split.train_ids.insert(split.train_ids.end(), ids.begin(), ids.end());
            split.warnings.push_back("source '" + source + "' has fewer than 2 documents; assigned wholly to train");
            continue;
        }
        Rng rng(stream_seed(seed, "split", {detail::fnv1a(source)}));
        rng.shuffle(ids);
        const std::size_t n_test = (ids.size() + 5) / 10;
        const std::size_t n_holdout = (n_test + 50) / 100;
        const std::size_t n_train = ids.size() - n_test;
        split.train_ids.insert(split.train_ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
        split.ppl_holdout_ids.insert(split.ppl_holdout_ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                                     ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_holdout));
        split.test_ids.insert(split.test_ids.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_holdout),
                              ids.end());
    }
    std::sort(split.train_ids.begin(), split.train_ids.end());
    std::sort(split.test_ids.begin(), split.test_ids.end());
    std::sort(split.ppl_holdout_ids.begin(), split.ppl_holdout_ids.end());
    return split;
}

inline void to_json(nlohmann::json& j, const SplitAssignment& s) {
    j = {{"seed", s.seed},
         {"train_ids", s.train_ids},
         {"test_ids", s.test_ids},
         {"ppl_holdout_ids", s.ppl_holdout_ids},
         {"warnings", s.warnings}};
}

inline void from_json(const nlohmann::json& j, SplitAssignment& s) {
    j.at("seed").get_to(s.seed);
    j.at("train_ids").get_to(s.train_ids);
    j.at("test_ids").get_to(s.test_ids);
    j.at("ppl_holdout_ids").get_to(s.ppl_holdout_ids);
    if (j.contains("warnings")) j.at("warnings").get_to(s.warnings);
}

/// Documents of `corpus` whose ids are in `ids`, in corpus order.
inline Corpus subset(const Corpus& corpus, const std::vector<std::string>& ids) {
    const std::unordered_set<std::string> keep(ids.begin(), ids.end());
    Corpus out;
    for (const auto& d : corpus.documents) {
        if (!keep.count(d.id)) continue;
        ++out.source_manifest[d.source];
        out.documents.push_back(d);
    }
    return out;
}

}  // namespace debatelm
