#pragma once

// Downstream fine-tuning: CoNLL / JSONL task loaders, sequence and token classification
// heads on a pre-trained encoder, the hyper-parameter grid, and seed-averaged sweeps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/encoder.hpp"
#include "debatelm/error.hpp"
#include "debatelm/metrics.hpp"
#include "debatelm/mlm.hpp"
#include "debatelm/optim.hpp"
#include "debatelm/wordpiece.hpp"

namespace debatelm {

enum class HeadKind { token_classification, sequence_classification };

inline std::string_view to_string(HeadKind h) {
    return h == HeadKind::token_classification ? "token_classification" : "sequence_classification";
}

struct TaskSpec {
    std::string name;
    HeadKind head = HeadKind::sequence_classification;
    std::vector<std::string> labels;  // class labels, or the full BIO tag inventory
    std::filesystem::path train, dev, test;
    std::string primary_metric = "macro_f1";  // "macro_f1" or "f1" (binary, positive_label)
    std::optional<std::string> positive_label;

    bool tagging() const { return head == HeadKind::token_classification; }

    static std::vector<std::string> bio_tags(const std::vector<std::string>& types) {
        std::vector<std::string> tags = {"O"};
        for (const auto& t : types) {
            tags.push_back("B-" + t);
            tags.push_back("I-" + t);
        }
        return tags;
    }

    /// The four task definitions with files `<dir>/{train,dev,test}.{conll,jsonl}`.
    static TaskSpec standard(std::string_view name, const std::filesystem::path& dir) {
        TaskSpec t;
        t.name = std::string(name);
        std::string ext = "jsonl";
        if (name == "ner") {
            t.head = HeadKind::token_classification;
            t.labels = bio_tags({"politician", "person", "organisation", "politicalparty", "election", "country"});
            ext = "conll";
        } else if (name == "arg_component") {
            t.head = HeadKind::token_classification;
            t.labels = bio_tags({"claim", "premise"});
            ext = "conll";
        } else if (name == "sentiment") {
            t.labels = {"negative", "positive"};
            t.primary_metric = "f1";
            t.positive_label = "positive";
        } else if (name == "arg_relation") {
            t.labels = {"attack", "support"};
        } else {
            throw ConfigError("unknown task '" + std::string(name) +
                              "' (expected ner, sentiment, arg_component or arg_relation)");
        }
        t.train = dir / ("train." + ext);
        t.dev = dir / ("dev." + ext);
        t.test = dir / ("test." + ext);
        return t;
    }
};

struct SequenceExample {
    std::string text_a;
    std::optional<std::string> text_b;
    int label = 0;
};

struct TaggingExample {
    std::vector<std::string> words;
    std::vector<int> tags;
};

struct TaskSplit {
    std::vector<SequenceExample> sequences;
    std::vector<TaggingExample> sentences;

    std::size_t size() const { return sequences.size() + sentences.size(); }
};

struct TaskData {
    TaskSpec spec;
    TaskSplit train, dev, test;
};

namespace detail {

inline int label_index(const TaskSpec& spec, const std::string& label, const std::filesystem::path& path,
                       std::size_t line) {
    const auto it = std::find(spec.labels.begin(), spec.labels.end(), label);
    if (it == spec.labels.end())
        throw DataError(path.string() + ":" + std::to_string(line) + ": unknown label '" + label + "' for task " +
                        spec.name);
    return static_cast<int>(it - spec.labels.begin());
}

inline TaskSplit load_jsonl_split(const TaskSpec& spec, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    TaskSplit split;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        SequenceExample ex;
        if (j.contains("text_a")) {
            if (!j.contains("text_b")) throw DataError(path.string() + ":" + std::to_string(line_no) + ": text_a without text_b");
            ex.text_a = j["text_a"].get<std::string>();
            ex.text_b = j["text_b"].get<std::string>();
        } else if (j.contains("text")) {
            ex.text_a = j["text"].get<std::string>();
        } else {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing 'text' or 'text_a'/'text_b'");
        }
        if (!j.contains("label") || !j["label"].is_string())
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": missing string 'label'");
        ex.label = label_index(spec, j["label"].get<std::string>(), path, line_no);
        split.sequences.push_back(std::move(ex));
    }
    return split;
}

inline TaskSplit load_conll_split(const TaskSpec& spec, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    TaskSplit split;
    TaggingExample cur;
    std::string line;
    std::size_t line_no = 0;
    auto flush = [&] {
        if (!cur.words.empty()) split.sentences.push_back(std::move(cur));
        cur = {};
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) {
            flush();
            continue;
        }
        if (line.starts_with("-DOCSTART-")) continue;
        std::istringstream fields(line);
        std::vector<std::string> cols;
        for (std::string f; fields >> f;) cols.push_back(f);
        if (cols.size() < 2)
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected token and tag columns");
        cur.words.push_back(cols.front());
        cur.tags.push_back(label_index(spec, cols.back(), path, line_no));
    }
    flush();
    return split;
}

}  // namespace detail

inline TaskSplit load_split(const TaskSpec& spec, const std::filesystem::path& path) {
    auto split = spec.tagging() ? detail::load_conll_split(spec, path) : detail::load_jsonl_split(spec, path);
    if (split.size() == 0) throw DataError("empty split " + path.string() + " for task " + spec.name);
    return split;
}

inline TaskData load_task(const TaskSpec& spec) {
    if (spec.labels.empty()) throw ConfigError("task " + spec.name + " has no labels");
    return {spec, load_split(spec, spec.train), load_split(spec, spec.dev), load_split(spec, spec.test)};
}

/// Per-split example counts and label balance (gold tags count every token for tagging).
inline nlohmann::json task_manifest(const TaskData& data) {
    auto split_json = [&](const TaskSplit& s) {
        std::map<std::string, std::size_t> counts;
        for (const auto& e : s.sequences) ++counts[data.spec.labels[static_cast<std::size_t>(e.label)]];
        for (const auto& e : s.sentences)
            for (int t : e.tags) ++counts[data.spec.labels[static_cast<std::size_t>(t)]];
        return nlohmann::json{{"examples", s.size()}, {"labels", counts}};
    };
    return {{"task", data.spec.name},
            {"head", to_string(data.spec.head)},
            {"train", split_json(data.train)},
            {"dev", split_json(data.dev)},
            {"test", split_json(data.test)}};
}

// ---------------------------------------------------------------------------------------
// Encoding

struct EncodedExample {
    MaskedRow row;
    int label = kIgnoreLabel;     // sequence tasks
    std::size_t kept_words = 0;   // tagging: words whose first piece survived truncation
    bool truncated = false;
};

/// CLS a SEP [b SEP]; pairs are truncated longest-first to fit max_len.
inline EncodedExample encode_sequence(const SequenceExample& ex, const Vocabulary& vocab, std::size_t max_len) {
    auto a = encode(ex.text_a, vocab).token_ids;
    std::vector<int> b;
    if (ex.text_b) b = encode(*ex.text_b, vocab).token_ids;
    const std::size_t specials = ex.text_b ? 3 : 2;
    if (max_len < specials + (ex.text_b ? 2 : 1)) throw ConfigError("max_len too small for task inputs");
    EncodedExample out;
    while (a.size() + b.size() + specials > max_len) {
        out.truncated = true;
        (a.size() >= b.size() ? a : b).pop_back();
    }
    auto& r = out.row;
    r.input_ids.push_back(Special::cls);
    r.input_ids.insert(r.input_ids.end(), a.begin(), a.end());
    r.input_ids.push_back(Special::sep);
    r.token_type.assign(r.input_ids.size(), 0);
    if (ex.text_b) {
        r.input_ids.insert(r.input_ids.end(), b.begin(), b.end());
        r.input_ids.push_back(Special::sep);
        r.token_type.resize(r.input_ids.size(), 1);
    }
    r.labels.assign(r.input_ids.size(), kIgnoreLabel);
    r.attention_mask.assign(r.input_ids.size(), 1);
    out.label = ex.label;
    return out;
}

/// Words become pieces; the first piece of each word carries its tag, continuation pieces
/// are ignored.  Words that do not fit entirely are dropped together with their tags.
inline EncodedExample encode_tagging(const TaggingExample& ex, const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 3) throw ConfigError("max_len too small for task inputs");
    EncodedExample out;
    auto& r = out.row;
    r.input_ids.push_back(Special::cls);
    r.labels.push_back(kIgnoreLabel);
    for (std::size_t w = 0; w < ex.words.size(); ++w) {
        auto pieces = encode(ex.words[w], vocab).token_ids;
        if (pieces.empty()) pieces.push_back(Special::unk);
        if (r.input_ids.size() + pieces.size() + 1 > max_len) {
            out.truncated = true;
            break;
        }
        for (std::size_t p = 0; p < pieces.size(); ++p) {
            r.input_ids.push_back(pieces[p]);
            r.labels.push_back(p == 0 ? ex.tags[w] : kIgnoreLabel);
        }
        ++out.kept_words;
    }
    r.input_ids.push_back(Special::sep);
    r.labels.push_back(kIgnoreLabel);
    r.attention_mask.assign(r.input_ids.size(), 1);
    return out;
}

inline std::vector<EncodedExample> encode_split(const TaskSpec& spec, const TaskSplit& split, const Vocabulary& vocab,
                                                std::size_t max_len) {
    std::vector<EncodedExample> out;
    out.reserve(split.size());
    for (const auto& e : split.sequences) out.push_back(encode_sequence(e, vocab, max_len));
    for (const auto& e : split.sentences) out.push_back(encode_tagging(e, vocab, max_len));
    (void)spec;
    return out;
}

inline MaskedBatch batch_of(const std::vector<EncodedExample>& examples, const std::vector<std::size_t>& idx,
                            std::vector<int>* labels = nullptr) {
    std::vector<MaskedRow> rows;
    rows.reserve(idx.size());
    for (auto i : idx) {
        rows.push_back(examples[i].row);
        if (labels) labels->push_back(examples[i].label);
    }
    pad_rows(rows);
    return make_batch(rows, false);
}

// ---------------------------------------------------------------------------------------
// Training

struct GridPoint {
    double learning_rate = 5e-5;
    double weight_decay = 0.01;
    std::size_t batch_size = 16;
    std::size_t epochs = 3;
    std::size_t max_len = 128;

    auto operator<=>(const GridPoint&) const = default;
    std::string label() const {
        std::ostringstream s;
        s << "lr=" << learning_rate << ",wd=" << weight_decay << ",bs=" << batch_size << ",ep=" << epochs
          << ",len=" << max_len;
        return s.str();
    }
};

inline nlohmann::json to_json_value(const GridPoint& p) {
    return {{"learning_rate", p.learning_rate}, {"weight_decay", p.weight_decay}, {"batch_size", p.batch_size},
            {"epochs", p.epochs}, {"max_len", p.max_len}};
}

struct HyperGrid {
    std::vector<double> learning_rates = {2e-5, 3e-5, 5e-5};
    std::vector<double> weight_decays = {0.1, 0.01};
    std::vector<std::size_t> batch_sizes = {8, 16, 32};
    std::vector<std::size_t> epochs = {2, 3, 4};
    std::vector<std::size_t> max_lens = {128, 256, 512};

    /// Cartesian product in lexicographic order of (lr, wd, batch, epochs, max_len), each
    /// dimension ascending.
    std::vector<GridPoint> points() const {
        auto sorted = [](auto v) {
            std::sort(v.begin(), v.end());
            v.erase(std::unique(v.begin(), v.end()), v.end());
            return v;
        };
        std::vector<GridPoint> out;
        for (double lr : sorted(learning_rates))
            for (double wd : sorted(weight_decays))
                for (auto bs : sorted(batch_sizes))
                    for (auto ep : sorted(epochs))
                        for (auto ml : sorted(max_lens)) out.push_back({lr, wd, bs, ep, ml});
        return out;
    }
};

struct FinetuneOptions {
    double warmup_fraction = 0.1;
    double clip_norm = 1.0;
    AdamConfig adam;  // weight_decay is taken from the grid point
    bool evaluate_train = false;
};

struct EpochScores {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double dev = 0.0;
    double test = 0.0;
    std::optional<double> train;
};

struct RunResult {
    std::string task;
    GridPoint point;
    std::uint64_t seed = 0;
    std::size_t best_epoch = 0;
    double dev_metric = 0.0;
    double test_metric = 0.0;
    std::optional<double> train_metric;  // at the best epoch, when requested
    std::vector<EpochScores> epochs;
    std::size_t truncated = 0;  // over train + dev + test
    double wall_seconds = 0.0;
};

inline nlohmann::json to_json_value(const RunResult& r) {
    nlohmann::json epochs = nlohmann::json::array();
    for (const auto& e : r.epochs) {
        nlohmann::json j = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev", e.dev}, {"test", e.test}};
        if (e.train) j["train"] = *e.train;
        epochs.push_back(j);
    }
    nlohmann::json j = {{"task", r.task},           {"point", to_json_value(r.point)}, {"seed", r.seed},
                        {"best_epoch", r.best_epoch}, {"dev", r.dev_metric},        {"test", r.test_metric},
                        {"truncated", r.truncated}, {"epochs", epochs}};
    if (r.train_metric) j["train"] = *r.train_metric;
    return j;
}

/// Primary metric of a task on encoded examples with the current parameters.
template <class T>
double evaluate_task(const EncoderParams<T>& params, const TaskSpec& spec, const TaskSplit& split,
                     const std::vector<EncodedExample>& encoded, std::size_t batch_size = 32) {
    std::vector<std::size_t> idx;
    if (!spec.tagging()) {
        std::vector<std::string> gold, pred;
        for (std::size_t start = 0; start < encoded.size(); start += batch_size) {
            idx.clear();
            for (std::size_t i = start; i < std::min(encoded.size(), start + batch_size); ++i) idx.push_back(i);
            std::vector<int> labels, predictions;
            const auto batch = batch_of(encoded, idx, &labels);
            sequence_classification_loss_and_grad<T>(params, batch, labels, nullptr, 1.0, {}, &predictions);
            for (std::size_t k = 0; k < idx.size(); ++k) {
                gold.push_back(spec.labels[static_cast<std::size_t>(labels[k])]);
                pred.push_back(spec.labels[static_cast<std::size_t>(predictions[k])]);
            }
        }
        const auto m = classification_metrics(gold, pred, spec.positive_label);
        return spec.primary_metric == "f1" && m.binary_f1 ? *m.binary_f1 : m.macro_f1;
    }
    std::vector<std::vector<std::string>> gold, pred;
    for (std::size_t start = 0; start < encoded.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(encoded.size(), start + batch_size); ++i) idx.push_back(i);
        std::vector<int> predictions;
        const auto batch = batch_of(encoded, idx);
        token_classification_loss_and_grad<T>(params, batch, nullptr, 1.0, {}, &predictions);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto& ex = split.sentences[idx[k]];
            const auto& enc = encoded[idx[k]];
            std::vector<std::string> g, p;
            for (std::size_t c = 0; c < batch.cols; ++c) {
                const int l = batch.labels[k * batch.cols + c];
                if (l == kIgnoreLabel) continue;
                p.push_back(spec.labels[static_cast<std::size_t>(predictions[k * batch.cols + c])]);
            }
            for (std::size_t w = 0; w < enc.kept_words; ++w) g.push_back(spec.labels[static_cast<std::size_t>(ex.tags[w])]);
            gold.push_back(std::move(g));
            pred.push_back(std::move(p));
        }
    }
    const auto m = tagging_metrics(gold, pred);
    return spec.primary_metric == "f1" ? m.f1 : m.macro_f1;
}

/// Fine-tunes a copy of `pretrained` (heads replaced by a freshly initialized task head)
/// end to end; evaluates dev and test after every epoch and reports the test score of the
/// first epoch with the best dev score.  Epoch 0 is the untrained head.
template <class T>
RunResult fine_tune(const EncoderParams<T>& pretrained, const Vocabulary& vocab, const TaskData& data,
                    const GridPoint& point, std::uint64_t seed, const FinetuneOptions& options = {}) {
    const auto started = std::chrono::steady_clock::now();
    if (point.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(point.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (pretrained.config.vocab_size != vocab.size())
        throw ConfigError("checkpoint vocabulary size " + std::to_string(pretrained.config.vocab_size) +
                          " does not match the tokenizer (" + std::to_string(vocab.size()) + ")");
    const auto& spec = data.spec;
    EncoderParams<T> params = pretrained;
    params.remove_heads();
    Rng head_rng(stream_seed(seed, "init", {detail::fnv1a("task-head")}));
    if (spec.tagging())
        params.add_token_head(spec.labels.size(), head_rng);
    else
        params.add_sequence_head(spec.labels.size(), head_rng);

    const std::size_t max_len = std::min(point.max_len, params.config.max_position);
    const auto train = encode_split(spec, data.train, vocab, max_len);
    const auto dev = encode_split(spec, data.dev, vocab, max_len);
    const auto test = encode_split(spec, data.test, vocab, max_len);

    RunResult result;
    result.task = spec.name;
    result.point = point;
    result.seed = seed;
    for (const auto* set : {&train, &dev, &test})
        for (const auto& e : *set) result.truncated += e.truncated ? 1 : 0;

    const std::size_t per_epoch = (train.size() + point.batch_size - 1) / point.batch_size;
    const std::size_t total = per_epoch * point.epochs;
    LinearSchedule sched{point.learning_rate,
                         static_cast<std::size_t>(std::floor(options.warmup_fraction * static_cast<double>(total))), total};
    AdamConfig adam = options.adam;
    adam.weight_decay = point.weight_decay;
    auto opt = OptimizerState<T>::for_params(params, adam, sched);
    Rng dropout_rng(stream_seed(seed, "dropout", {detail::fnv1a("finetune")}));

    auto score_epoch = [&](std::size_t epoch, double train_loss) {
        EpochScores s;
        s.epoch = epoch;
        s.train_loss = train_loss;
        s.dev = evaluate_task(params, spec, data.dev, dev);
        s.test = evaluate_task(params, spec, data.test, test);
        if (options.evaluate_train) s.train = evaluate_task(params, spec, data.train, train);
        result.epochs.push_back(s);
        if (epoch == 0 || s.dev > result.dev_metric) {
            result.best_epoch = epoch;
            result.dev_metric = s.dev;
            result.test_metric = s.test;
            result.train_metric = s.train;
        }
    };
    score_epoch(0, 0.0);

    std::size_t step = 0;
    std::vector<std::size_t> order(train.size());
    for (std::size_t epoch = 1; epoch <= point.epochs; ++epoch) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(stream_seed(seed, "sampling", {detail::fnv1a("finetune"), epoch}));
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += point.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + point.batch_size)));
            std::vector<int> labels;
            const auto batch = batch_of(train, idx, &labels);
            auto grads = params.zero_gradients();
            const ForwardOptions fo{true, &dropout_rng};
            const auto lv = spec.tagging() ? token_classification_loss_and_grad<T>(params, batch, &grads, 1.0, fo)
                                           : sequence_classification_loss_and_grad<T>(params, batch, labels, &grads, 1.0, fo);
            if (!std::isfinite(lv.loss)) throw NumericError("non-finite fine-tuning loss at step " + std::to_string(step + 1));
            loss_sum += lv.loss;
            clip_global_norm(grads, options.clip_norm);
            ++step;
            if (lv.count > 0) adam_step(params, grads, opt, lr_at(step, sched));
        }
        score_epoch(epoch, per_epoch ? loss_sum / static_cast<double>(per_epoch) : 0.0);
    }
    result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return result;
}

// ---------------------------------------------------------------------------------------
// Sweeps and reports

struct PointSummary {
    GridPoint point;
    std::vector<RunResult> runs;
    std::vector<std::pair<std::uint64_t, std::string>> failures;
    bool skipped = false;  // more than two failed seeds
    double mean_dev = 0.0;
};

struct MetricsReport {
    std::string model;
    std::string task;
    std::string metric;
    std::optional<GridPoint> selected;
    std::vector<std::uint64_t> seeds;
    std::vector<double> scores;  // test metric per seed at the selected point
    double mean = 0.0;
    double std = 0.0;
    std::vector<Significance> significance;
};

struct SweepResult {
    std::vector<PointSummary> points;
    MetricsReport report;
};

/// Each grid point runs every seed; points with more than two failures are skipped.  The
/// point with the highest mean dev metric is selected (ties: first in grid order).
template <class T>
SweepResult sweep(const EncoderParams<T>& pretrained, const Vocabulary& vocab, const TaskData& data,
                  const std::vector<GridPoint>& grid, const std::vector<std::uint64_t>& seeds, const std::string& model,
                  const FinetuneOptions& options = {},
                  const std::function<void(const RunResult&)>& on_run = {}) {
    if (grid.empty()) throw ConfigError("hyper-parameter grid is empty");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    SweepResult out;
    std::optional<std::size_t> best;
    for (const auto& point : grid) {
        PointSummary ps;
        ps.point = point;
        for (auto seed : seeds) {
            try {
                ps.runs.push_back(fine_tune(pretrained, vocab, data, point, seed, options));
                if (on_run) on_run(ps.runs.back());
            } catch (const NumericError& e) {
                ps.failures.emplace_back(seed, e.what());
            }
        }
        ps.skipped = ps.failures.size() > 2 || ps.runs.empty();
        if (!ps.skipped) {
            double s = 0.0;
            for (const auto& r : ps.runs) s += r.dev_metric;
            ps.mean_dev = s / static_cast<double>(ps.runs.size());
            if (!best || ps.mean_dev > out.points[*best].mean_dev) best = out.points.size();
        }
        out.points.push_back(std::move(ps));
    }
    auto& rep = out.report;
    rep.model = model;
    rep.task = data.spec.name;
    rep.metric = data.spec.primary_metric;
    if (!best) throw NumericError("every grid point failed for task " + data.spec.name);
    const auto& chosen = out.points[*best];
    rep.selected = chosen.point;
    for (const auto& r : chosen.runs) {
        rep.seeds.push_back(r.seed);
        rep.scores.push_back(r.test_metric);
    }
    std::tie(rep.mean, rep.std) = mean_std(rep.scores);
    return out;
}

/// Paired t-test of `report` against `baseline` over their common seeds.
inline Significance compare_reports(const MetricsReport& report, const MetricsReport& baseline) {
    if (report.task != baseline.task)
        throw DataError("cannot compare " + report.task + " against a " + baseline.task + " baseline");
    std::vector<double> a, b;
    for (std::size_t i = 0; i < report.seeds.size(); ++i)
        for (std::size_t j = 0; j < baseline.seeds.size(); ++j)
            if (report.seeds[i] == baseline.seeds[j]) {
                a.push_back(report.scores[i]);
                b.push_back(baseline.scores[j]);
            }
    return {baseline.model, paired_t_test(a, b)};
}

inline nlohmann::json to_json_value(const MetricsReport& r) {
    nlohmann::json sig = nlohmann::json::array();
    for (const auto& s : r.significance) {
        auto j = to_json_value(s.test);
        j["baseline"] = s.baseline;
        sig.push_back(j);
    }
    return {{"model", r.model},
            {"task", r.task},
            {"metric", r.metric},
            {"selected", r.selected ? to_json_value(*r.selected) : nlohmann::json(nullptr)},
            {"seeds", r.seeds},
            {"scores", r.scores},
            {"mean", r.mean},
            {"std", r.std},
            {"significance", sig}};
}

inline MetricsReport metrics_report_from_json(const nlohmann::json& j) {
    MetricsReport r;
    try {
        r.model = j.at("model").get<std::string>();
        r.task = j.at("task").get<std::string>();
        r.metric = j.at("metric").get<std::string>();
        j.at("seeds").get_to(r.seeds);
        j.at("scores").get_to(r.scores);
        r.mean = j.at("mean").get<double>();
        r.std = j.at("std").get<double>();
        if (j.contains("selected") && !j["selected"].is_null()) {
            const auto& p = j["selected"];
            r.selected = GridPoint{p.at("learning_rate").get<double>(), p.at("weight_decay").get<double>(),
                                   p.at("batch_size").get<std::size_t>(), p.at("epochs").get<std::size_t>(),
                                   p.at("max_len").get<std::size_t>()};
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed metrics report: ") + e.what());
    }
    if (r.seeds.size() != r.scores.size()) throw DataError("metrics report has mismatched seeds and scores");
    return r;
}

/// "0.728 ± 0.004"
inline std::string mean_pm_std(double mean, double std) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f ± %.3f", mean, std);
    return buf;
}

/// One row per model, one column per task, cells "mean ± std".
inline std::string leaderboard_csv(const std::vector<MetricsReport>& reports) {
    std::vector<std::string> models, tasks;
    std::map<std::pair<std::string, std::string>, const MetricsReport*> cell;
    for (const auto& r : reports) {
        if (std::find(models.begin(), models.end(), r.model) == models.end()) models.push_back(r.model);
        if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
        cell[{r.model, r.task}] = &r;
    }
    std::string out = "model";
    for (const auto& t : tasks) out += "," + t;
    out += "\n";
    for (const auto& m : models) {
        out += m;
        for (const auto& t : tasks) {
            out += ",";
            if (auto it = cell.find({m, t}); it != cell.end()) out += mean_pm_std(it->second->mean, it->second->std);
        }
        out += "\n";
    }
    return out;
}

}  // namespace debatelm
