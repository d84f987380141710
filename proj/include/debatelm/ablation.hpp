#pragma once

// Source-level similarity and the leave-one-cluster-out protocol: average sentence
// embeddings per source, cosine distances, agglomerative clustering under a distance
// threshold, and corpora with one cluster removed.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/corpus.hpp"
#include "debatelm/encoder.hpp"
#include "debatelm/error.hpp"
#include "debatelm/mlm.hpp"
#include "debatelm/rng.hpp"
#include "debatelm/wordpiece.hpp"

namespace debatelm {

/// Maps a batch of sentences to one vector each, all of the same dimension.
using SentenceEmbedder = std::function<std::vector<std::vector<double>>(const std::vector<std::string>&)>;

struct SourceEmbedding {
    std::string source;
    std::vector<double> vector;
    std::size_t sample_size = 0;
    bool near_zero = false;  // mean norm below 1e-9 (e.g. cancelling sentence vectors)
};

/// Sentences of a cleaned document: split after . ! ? followed by a space.
inline std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || text[i + 1] == ' ')) {
            out.emplace_back(text.substr(start, i + 1 - start));
            start = i + 2;
        }
    }
    if (start < text.size()) out.emplace_back(text.substr(start));
    return out;
}

inline std::map<std::string, std::vector<std::string>> sentences_by_source(const Corpus& corpus) {
    std::map<std::string, std::vector<std::string>> out;
    for (const auto& d : corpus.documents)
        for (auto& s : split_sentences(d.text)) out[d.source].push_back(std::move(s));
    return out;
}

/// Unweighted mean of the embeddings of `sample_n` seeded-sampled sentences (all of them
/// when sample_n is 0 or at least the source size).  Sampled sentences keep source order.
inline SourceEmbedding embed_source(const std::string& source, const std::vector<std::string>& sentences,
                                    const SentenceEmbedder& embedder, std::size_t sample_n, std::uint64_t seed) {
    if (sentences.empty()) throw DataError("source '" + source + "' has no sentences to embed");
    std::vector<std::size_t> idx(sentences.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (sample_n != 0 && sample_n < idx.size()) {
        Rng rng(stream_seed(seed, "sampling", {detail::fnv1a(source)}));
        rng.shuffle(idx);
        idx.resize(sample_n);
        std::sort(idx.begin(), idx.end());
    }
    std::vector<std::string> picked;
    picked.reserve(idx.size());
    for (auto i : idx) picked.push_back(sentences[i]);
    const auto vecs = embedder(picked);
    if (vecs.size() != picked.size()) throw DataError("embedder returned the wrong number of vectors");
    SourceEmbedding e;
    e.source = source;
    e.sample_size = picked.size();
    e.vector.assign(vecs.front().size(), 0.0);
    for (const auto& v : vecs) {
        if (v.size() != e.vector.size()) throw DataError("embedder returned vectors of differing dimension");
        for (std::size_t k = 0; k < v.size(); ++k) e.vector[k] += v[k];
    }
    double norm = 0.0;
    for (auto& x : e.vector) {
        x /= static_cast<double>(vecs.size());
        if (!std::isfinite(x)) throw NumericError("non-finite embedding for source '" + source + "'");
        norm += x * x;
    }
    e.near_zero = std::sqrt(norm) < 1e-9;
    return e;
}

/// Signed feature hashing of normalized words (punctuation dropped), L2-normalized.
inline SentenceEmbedder hashed_bag_of_words(std::size_t dim = 512, Casing casing = Casing::uncased) {
    if (dim == 0) throw ConfigError("embedding dimension must be positive");
    return [dim, casing](const std::vector<std::string>& sentences) {
        std::vector<std::vector<double>> out;
        out.reserve(sentences.size());
        for (const auto& s : sentences) {
            std::vector<double> v(dim, 0.0);
            const auto norm_text = normalize(s, casing);
            for (const auto& w : pretokenize(norm_text)) {
                if (w.text.size() == 1 && !std::isalnum(static_cast<unsigned char>(w.text[0]))) continue;
                const std::uint64_t h = detail::splitmix64(detail::fnv1a(w.text));
                v[h % dim] += (h >> 63) ? -1.0 : 1.0;
            }
            double n = 0.0;
            for (double x : v) n += x * x;
            if (n > 0.0)
                for (double& x : v) x /= std::sqrt(n);
            out.push_back(std::move(v));
        }
        return out;
    };
}

/// Mean-pooled final-layer states over the real (non-PAD) positions of each sentence.
template <class T>
SentenceEmbedder encoder_mean_pool(const EncoderParams<T>& params, const Vocabulary& vocab,
                                   std::size_t max_len = 128, std::size_t batch_size = 32) {
    return [&params, &vocab, max_len, batch_size](const std::vector<std::string>& sentences) {
        const std::size_t H = params.config.hidden;
        const std::size_t len = std::min(max_len, params.config.max_position);
        std::vector<std::vector<double>> out;
        out.reserve(sentences.size());
        for (std::size_t start = 0; start < sentences.size(); start += batch_size) {
            const std::size_t end = std::min(sentences.size(), start + batch_size);
            std::vector<MaskedRow> rows;
            for (std::size_t i = start; i < end; ++i) {
                auto ids = encode(sentences[i], vocab).token_ids;
                if (ids.size() > len - 2) ids.resize(len - 2);
                std::vector<int> seq;
                seq.push_back(Special::cls);
                seq.insert(seq.end(), ids.begin(), ids.end());
                seq.push_back(Special::sep);
                MaskedRow r;
                r.input_ids = seq;
                r.labels.assign(seq.size(), kIgnoreLabel);
                r.attention_mask.assign(seq.size(), 1);
                rows.push_back(std::move(r));
            }
            pad_rows(rows);
            const auto batch = make_batch(rows, false);
            const auto h = hidden_states(params, batch);
            for (std::size_t b = 0; b < batch.rows; ++b) {
                std::vector<double> v(H, 0.0);
                std::size_t n = 0;
                for (std::size_t c = 0; c < batch.cols; ++c) {
                    if (!batch.attention_mask[b * batch.cols + c]) continue;
                    const T* row = h.row(b * batch.cols + c);
                    for (std::size_t k = 0; k < H; ++k) v[k] += static_cast<double>(row[k]);
                    ++n;
                }
                for (auto& x : v) x /= static_cast<double>(n);
                out.push_back(std::move(v));
            }
        }
        return out;
    };
}

/// Precomputed sentence vectors, JSONL lines {"source": ..., "vector": [...]}.
inline std::map<std::string, std::vector<std::vector<double>>> load_vector_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vector file " + path.string());
    std::map<std::string, std::vector<std::vector<double>>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            out[j.at("source").get<std::string>()].push_back(j.at("vector").get<std::vector<double>>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

using DistanceMatrix = std::vector<std::vector<double>>;

/// d(i, j) = 1 − cos(v_i, v_j), clamped to [0, 2]; diagonal exactly 0.
inline DistanceMatrix cosine_distance_matrix(const std::vector<SourceEmbedding>& embeddings) {
    const std::size_t n = embeddings.size();
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (double x : embeddings[i].vector) s += x * x;
        norms[i] = std::sqrt(s);
        if (norms[i] == 0.0) throw DataError("zero-norm embedding for source '" + embeddings[i].source + "'");
        if (embeddings[i].vector.size() != embeddings[0].vector.size())
            throw DataError("embedding dimension differs for source '" + embeddings[i].source + "'");
    }
    DistanceMatrix d(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < embeddings[i].vector.size(); ++k)
                dot += embeddings[i].vector[k] * embeddings[j].vector[k];
            d[i][j] = d[j][i] = std::clamp(1.0 - dot / (norms[i] * norms[j]), 0.0, 2.0);
        }
    return d;
}

enum class Linkage { average, single, complete };

inline std::string_view to_string(Linkage l) {
    return l == Linkage::average ? "average" : l == Linkage::single ? "single" : "complete";
}

inline Linkage parse_linkage(std::string_view s) {
    if (s == "average") return Linkage::average;
    if (s == "single") return Linkage::single;
    if (s == "complete") return Linkage::complete;
    throw ConfigError("unknown linkage '" + std::string(s) + "' (expected average, single or complete)");
}

struct Merge {
    std::vector<std::size_t> left, right;  // point indices
    double height = 0.0;
};

struct ClusterAssignment {
    std::vector<std::size_t> labels;  // per point, dense from 0 in order of first appearance
    std::size_t clusters = 0;
    double threshold = 0.2;
    Linkage linkage = Linkage::average;
    std::vector<Merge> dendrogram;
};

inline double linkage_distance(const DistanceMatrix& d, const std::vector<std::size_t>& a,
                               const std::vector<std::size_t>& b, Linkage linkage) {
    double acc = linkage == Linkage::single ? std::numeric_limits<double>::infinity() : 0.0;
    for (auto i : a)
        for (auto j : b) {
            if (linkage == Linkage::single) acc = std::min(acc, d[i][j]);
            else if (linkage == Linkage::complete) acc = std::max(acc, d[i][j]);
            else acc += d[i][j];
        }
    if (linkage == Linkage::average) acc /= static_cast<double>(a.size() * b.size());
    return acc;
}

/// Repeatedly merge the closest pair of clusters while its linkage distance is at most
/// `threshold`.  Clusters are kept ordered by their smallest member; ties go to the
/// lexicographically smallest (i, j) pair in that order.
inline ClusterAssignment agglomerative_cluster(const DistanceMatrix& d, double threshold = 0.2,
                                               Linkage linkage = Linkage::average) {
    const std::size_t n = d.size();
    for (std::size_t i = 0; i < n; ++i) {
        if (d[i].size() != n) throw DataError("distance matrix is not square");
        if (d[i][i] != 0.0) throw DataError("distance matrix diagonal must be zero");
        for (std::size_t j = 0; j < n; ++j)
            if (d[i][j] != d[j][i] || d[i][j] < 0.0) throw DataError("distance matrix must be symmetric and non-negative");
    }
    std::vector<std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < n; ++i) clusters.push_back({i});
    ClusterAssignment out;
    out.threshold = threshold;
    out.linkage = linkage;
    while (clusters.size() > 1) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t bi = 0, bj = 0;
        for (std::size_t i = 0; i < clusters.size(); ++i)
            for (std::size_t j = i + 1; j < clusters.size(); ++j) {
                const double dist = linkage_distance(d, clusters[i], clusters[j], linkage);
                if (dist < best) best = dist, bi = i, bj = j;
            }
        if (best > threshold) break;
        out.dendrogram.push_back({clusters[bi], clusters[bj], best});
        clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
        std::sort(clusters[bi].begin(), clusters[bi].end());
        clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
    }
    out.labels.assign(n, 0);
    out.clusters = clusters.size();
    // clusters are ordered by smallest member, which is first-appearance order
    for (std::size_t c = 0; c < clusters.size(); ++c)
        for (auto i : clusters[c]) out.labels[i] = c;
    return out;
}

struct AblationCorpus {
    std::size_t cluster = 0;
    Corpus corpus;
    std::vector<std::string> excluded_sources;
    std::vector<std::string> retained_sources;
};

/// `corpus` without the sources assigned to `cluster`.
inline AblationCorpus leave_one_cluster_out(const Corpus& corpus, const std::map<std::string, std::size_t>& assignment,
                                            std::size_t cluster) {
    bool exists = false;
    for (const auto& [s, c] : assignment) exists = exists || c == cluster;
    if (!exists) throw ConfigError("cluster " + std::to_string(cluster) + " does not exist");
    AblationCorpus out;
    out.cluster = cluster;
    std::set<std::string> excluded;
    for (const auto& [s, c] : assignment)
        if (c == cluster) excluded.insert(s);
    for (const auto& d : corpus.documents) {
        if (excluded.count(d.source)) continue;
        ++out.corpus.source_manifest[d.source];
        out.corpus.documents.push_back(d);
    }
    for (const auto& [s, n] : corpus.source_manifest)
        (excluded.count(s) ? out.excluded_sources : out.retained_sources).push_back(s);
    if (out.corpus.empty()) throw DataError("excluding cluster " + std::to_string(cluster) + " removes every source");
    return out;
}

inline std::map<std::string, std::size_t> assignment_by_source(const std::vector<SourceEmbedding>& embeddings,
                                                               const ClusterAssignment& a) {
    std::map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < embeddings.size(); ++i) out[embeddings[i].source] = a.labels[i];
    return out;
}

inline nlohmann::json clusters_json(const std::vector<SourceEmbedding>& embeddings, const DistanceMatrix& d,
                                    const ClusterAssignment& a) {
    nlohmann::json sources = nlohmann::json::array(), assignment = nlohmann::json::object(),
                   dendrogram = nlohmann::json::array(), samples = nlohmann::json::object();
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        sources.push_back(embeddings[i].source);
        assignment[embeddings[i].source] = a.labels[i];
        samples[embeddings[i].source] = embeddings[i].sample_size;
    }
    for (const auto& m : a.dendrogram) dendrogram.push_back({{"left", m.left}, {"right", m.right}, {"height", m.height}});
    return {{"threshold", a.threshold},   {"linkage", to_string(a.linkage)}, {"sources", sources},
            {"assignment", assignment},   {"clusters", a.clusters},          {"distance_matrix", d},
            {"sample_sizes", samples},    {"dendrogram", dendrogram}};
}

}  // namespace debatelm
