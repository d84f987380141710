#pragma once

// Pipeline subcommands.  Each stage reads the artifacts of earlier stages from
// <work>/<stage>/ and writes its own plus a run.json provenance record.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/ablation.hpp"
#include "debatelm/checkpoint.hpp"
#include "debatelm/config.hpp"
#include "debatelm/corpus.hpp"
#include "debatelm/error.hpp"
#include "debatelm/finetune.hpp"
#include "debatelm/hash.hpp"
#include "debatelm/mlm.hpp"
#include "debatelm/pretrain.hpp"
#include "debatelm/synthetic.hpp"
#include "debatelm/wordpiece.hpp"

namespace debatelm::cli {

namespace fs = std::filesystem;

/// Flags that name stage inputs or outputs rather than configuration.
struct CommandOptions {
    std::optional<fs::path> checkpoint;      // eval-ppl, finetune, sweep, ablate
    std::optional<std::string> split;        // eval-ppl: holdout | test
    std::vector<fs::path> reports;           // report
    std::vector<std::string> baselines;      // report: baseline model names
    std::size_t cache_batches = 0;           // build-data
    fs::path out = "data/toy";               // gen-toy
    bool quiet = false;
};

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Content hash of a file, or of a directory as the sorted (relative path, blob hash) list.
inline std::string content_hash(const fs::path& p) {
    if (!fs::is_directory(p)) return file_hash(p);
    std::vector<std::string> entries;
    for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) entries.push_back(fs::relative(e.path(), p).generic_string() + " " + file_hash(e.path()));
    std::sort(entries.begin(), entries.end());
    std::string listing;
    for (const auto& e : entries) listing += e + "\n";
    return git_blob_hash(listing);
}

/// Provenance for one subcommand invocation.  run.json is written on success and on
/// failure; a failed record marks whatever outputs were already written as partial.
class StageRun {
public:
    StageRun(std::string command, const RunConfig& cfg, fs::path dir)
        : command_(std::move(command)), cfg_(cfg), dir_(std::move(dir)), started_(utc_now()) {
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }

    void input(const fs::path& p) {
        if (!fs::exists(p)) throw DataError("missing input " + p.string());
        inputs_[p.generic_string()] = content_hash(p);
    }

    void output(const std::string& name, std::string_view content) {
        write_file_atomic(dir_ / name, content);
        outputs_[name] = git_blob_hash(content);
    }

    /// Records a file some other writer already placed in the stage directory.
    void output_file(const std::string& name) { outputs_[name] = file_hash(dir_ / name); }

    nlohmann::json& summary() { return summary_; }

    void finish() { write("ok", std::nullopt); }
    void fail(const std::string& error) { write("failed", error); }

private:
    void write(const std::string& status, const std::optional<std::string>& error) {
        nlohmann::json j = {{"command", command_},
                            {"status", status},
                            {"seed", cfg_.seed},
                            {"config_hash", config_hash(cfg_)},
                            {"config", to_json_value(cfg_)},
                            {"inputs", inputs_},
                            {"outputs", outputs_},
                            {"summary", summary_},
                            {"started_at", started_},
                            {"finished_at", utc_now()}};
        if (error) j["error"] = *error;
        write_file_atomic(dir_ / "run.json", j.dump(2) + "\n");
    }

    std::string command_;
    const RunConfig& cfg_;
    fs::path dir_;
    std::string started_;
    std::map<std::string, std::string> inputs_, outputs_;
    nlohmann::json summary_ = nlohmann::json::object();
};

/// Runs `body` and writes run.json whatever happens; errors propagate to the caller.
template <class Body>
void staged(StageRun& run, Body&& body) {
    try {
        body();
    } catch (const std::exception& e) {
        run.fail(e.what());
        throw;
    }
    run.finish();
}

inline nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(p.string() + ": " + e.what());
    }
}

inline std::string jsonl(const std::vector<nlohmann::json>& rows) {
    std::string out;
    for (const auto& r : rows) out += r.dump() + "\n";
    return out;
}

inline void log(const CommandOptions& o, const std::string& line) {
    if (!o.quiet) std::cerr << line << "\n";
}

// ---------------------------------------------------------------------------------------
// Artifact locations

inline fs::path corpus_path(const RunConfig& c) { return c.stage_dir("ingest") / "corpus.jsonl"; }
inline fs::path splits_path(const RunConfig& c) { return c.stage_dir("ingest") / "splits.json"; }
inline fs::path vocab_path(const RunConfig& c) { return c.stage_dir("tokenizer") / "vocab.txt"; }
inline fs::path shard_path(const RunConfig& c, std::string_view split) {
    return c.stage_dir("data") / (std::string(split) + ".jsonl");
}
inline fs::path final_checkpoint_path(const RunConfig& c) { return c.stage_dir("pretrain") / "checkpoint.dlm"; }

inline Vocabulary load_stage_vocab(const RunConfig& c) { return Vocabulary::load(vocab_path(c), c.casing); }

inline std::vector<std::vector<int>> load_shard(const fs::path& p) {
    std::vector<std::vector<int>> docs;
    std::ifstream in(p);
    if (!in) throw DataError("cannot open " + p.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            docs.push_back(nlohmann::json::parse(line).at("ids").get<std::vector<int>>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError(p.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return docs;
}

template <class T>
EncoderParams<T> load_compatible_checkpoint(const fs::path& p, const Vocabulary& vocab) {
    auto ck = load_checkpoint<T>(p);
    if (!ck.vocab_hash.empty() && ck.vocab_hash != vocab.hash())
        throw ConfigError("checkpoint " + p.string() + " was trained with a different vocabulary (hash " +
                          ck.vocab_hash + ", tokenizer " + vocab.hash() + ")");
    if (ck.params.config.vocab_size != vocab.size())
        throw ConfigError("checkpoint " + p.string() + " expects a vocabulary of " +
                          std::to_string(ck.params.config.vocab_size) + " tokens, tokenizer has " +
                          std::to_string(vocab.size()));
    return std::move(ck.params);
}

template <class F>
void with_precision(const RunConfig& c, F&& f) {
    if (c.precision == "double")
        f(double{});
    else
        f(float{});
}

// ---------------------------------------------------------------------------------------
// Stages

inline void ingest(const RunConfig& cfg, const CommandOptions& opt) {
    StageRun run("ingest", cfg, cfg.stage_dir("ingest"));
    staged(run, [&] {
        RunConfig::require_exists("paths.corpus", cfg.paths.corpus);
        std::vector<std::regex> patterns;
        for (const auto& p : cfg.drop_patterns) {
            try {
                patterns.emplace_back(p);
            } catch (const std::regex_error& e) {
                throw ConfigError("ingest.drop_patterns: invalid pattern '" + p + "': " + e.what());
            }
        }
        run.input(cfg.paths.corpus);
        const auto corpus = load_corpus(cfg.paths.corpus, patterns);
        if (corpus.empty()) throw DataError("no documents survive cleaning in " + cfg.paths.corpus.string());
        const auto split = split_corpus(corpus, cfg.seed);
        run.output("corpus.jsonl", corpus_to_jsonl(corpus));
        run.output("splits.json", nlohmann::json(split).dump(2) + "\n");
        run.summary() = {{"documents", corpus.size()},
                         {"dropped_empty", corpus.dropped_empty},
                         {"sources", corpus.source_manifest},
                         {"train", split.train_ids.size()},
                         {"test", split.test_ids.size()},
                         {"ppl_holdout", split.ppl_holdout_ids.size()}};
        for (const auto& w : split.warnings) log(opt, "warning: " + w);
        log(opt, "ingest: " + std::to_string(corpus.size()) + " documents, " + std::to_string(split.train_ids.size()) +
                     " train / " + std::to_string(split.test_ids.size()) + " test / " +
                     std::to_string(split.ppl_holdout_ids.size()) + " hold-out");
    });
}

struct SplitCorpora {
    Corpus train, test, holdout;
};

inline SplitCorpora load_split_corpora(const RunConfig& cfg, StageRun& run) {
    run.input(corpus_path(cfg));
    run.input(splits_path(cfg));
    const auto corpus = load_jsonl(corpus_path(cfg));
    SplitAssignment split;
    try {
        split = read_json(splits_path(cfg)).get<SplitAssignment>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("splits.json: " + std::string(e.what()));
    }
    return {subset(corpus, split.train_ids), subset(corpus, split.test_ids), subset(corpus, split.ppl_holdout_ids)};
}

inline void train_tokenizer(const RunConfig& cfg, const CommandOptions& opt) {
    cfg.validate_mode();
    StageRun run("train-tokenizer", cfg, cfg.stage_dir("tokenizer"));
    staged(run, [&] {
        const auto corpora = load_split_corpora(cfg, run);
        Vocabulary vocab;
        std::optional<Vocabulary> reference;
        if (!cfg.paths.vocab.empty()) {
            RunConfig::require_exists("paths.vocab", cfg.paths.vocab);
            run.input(cfg.paths.vocab);
            reference = Vocabulary::load(cfg.paths.vocab, cfg.casing);
        }
        nlohmann::json summary = {{"mode", to_string(cfg.mode)}, {"casing", to_string(cfg.casing)}};
        if (cfg.mode == InitMode::cont) {
            vocab = *reference;
            summary["inherited_from"] = cfg.paths.vocab.generic_string();
        } else {
            TrainStats stats;
            vocab = train_vocabulary(corpora.train, cfg.tokenizer.budget, cfg.casing, &stats);
            summary["budget"] = cfg.tokenizer.budget;
            summary["alphabet_size"] = stats.alphabet_size;
            summary["merges"] = stats.merges;
            summary["exhausted"] = stats.exhausted;
            summary["distinct_words"] = stats.distinct_words;
            if (reference) summary["overlap_with_reference"] = vocab_overlap(vocab, *reference);
            if (stats.exhausted)
                log(opt, "train-tokenizer: merges exhausted at " + std::to_string(vocab.size()) + " tokens (budget " +
                             std::to_string(cfg.tokenizer.budget) + ")");
        }
        summary["size"] = vocab.size();
        summary["hash"] = vocab.hash();
        run.output("vocab.txt", vocab.to_text());
        std::vector<NamedVocabulary> named = {{cfg.model_name(), &vocab}};
        if (reference && cfg.mode == InitMode::scr) named.push_back({"reference", &*reference});
        run.output("fragmentation.csv", fragmentation_csv(fragmentation_report(cfg.tokenizer.report_words, named)));
        run.output("stats.json", summary.dump(2) + "\n");
        run.summary() = summary;
        log(opt, "train-tokenizer: " + std::to_string(vocab.size()) + " tokens, hash " + vocab.hash());
    });
}

inline void build_data(const RunConfig& cfg, const CommandOptions& opt) {
    StageRun run("build-data", cfg, cfg.stage_dir("data"));
    staged(run, [&] {
        const auto corpora = load_split_corpora(cfg, run);
        run.input(vocab_path(cfg));
        const auto vocab = load_stage_vocab(cfg);
        nlohmann::json counts = nlohmann::json::object();
        std::vector<std::vector<int>> train_docs;
        for (const auto& [name, corpus] : {std::pair<std::string, const Corpus*>{"train", &corpora.train},
                                           {"test", &corpora.test}, {"holdout", &corpora.holdout}}) {
            std::vector<nlohmann::json> rows;
            std::size_t tokens = 0, unk = 0;
            for (const auto& d : corpus->documents) {
                auto ids = encode(d.text, vocab).token_ids;
                tokens += ids.size();
                unk += static_cast<std::size_t>(std::count(ids.begin(), ids.end(), Special::unk));
                rows.push_back({{"id", d.id}, {"ids", ids}});
                if (name == "train") train_docs.push_back(std::move(ids));
            }
            run.output(name + ".jsonl", jsonl(rows));
            counts[name] = {{"documents", corpus->size()}, {"tokens", tokens}, {"unk", unk}};
        }
        if (opt.cache_batches > 0) {
            if (train_docs.empty()) throw DataError("no training documents to cache batches from");
            MlmBatchStream stream(train_docs, vocab.size(), cfg.pretrain.packing, cfg.pretrain.batch_size,
                                  cfg.pretrain.steps);
            std::vector<nlohmann::json> records;
            for (std::size_t step = 1; step <= std::min(opt.cache_batches, cfg.pretrain.steps); ++step) {
                BatchOrigin origin;
                const auto b = stream.next(step, &origin);
                records.push_back(batch_record(b, cfg.seed, origin));
            }
            run.output("batches.jsonl", jsonl(records));
        }
        nlohmann::json manifest = {{"vocab_hash", vocab.hash()}, {"vocab_size", vocab.size()}, {"splits", counts}};
        run.output("manifest.json", manifest.dump(2) + "\n");
        run.summary() = manifest;
        log(opt, "build-data: " + counts.dump());
    });
}

inline void check_shard_vocab(const RunConfig& cfg, const Vocabulary& vocab) {
    const auto manifest = read_json(cfg.stage_dir("data") / "manifest.json");
    if (manifest.value("vocab_hash", std::string()) != vocab.hash())
        throw ConfigError("token shards in " + cfg.stage_dir("data").string() +
                          " were built with a different vocabulary; re-run build-data");
}

template <class T>
void pretrain_impl(const RunConfig& cfg, const CommandOptions& opt) {
    StageRun run("pretrain", cfg, cfg.stage_dir("pretrain"));
    std::vector<TraceRow> trace;
    std::vector<EvalRow> evals;
    std::optional<std::string> last_checkpoint;
    auto write_traces = [&] {
        std::string t = "step,lr,max_len,cols,loss,targets,grad_norm\n";
        char buf[256];
        for (const auto& r : trace) {
            std::snprintf(buf, sizeof buf, "%zu,%.17g,%zu,%zu,%.17g,%zu,%.17g\n", r.step, r.lr, r.max_len, r.cols, r.loss,
                          r.targets, r.grad_norm);
            t += buf;
        }
        run.output("trace.csv", t);
        std::string e = "step,loss,ppl,targets\n";
        for (const auto& r : evals) {
            std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%zu\n", r.step, r.loss, r.ppl, r.targets);
            e += buf;
        }
        run.output("evals.csv", e);
    };
    try {
        cfg.validate_mode();
        run.input(vocab_path(cfg));
        const auto vocab = load_stage_vocab(cfg);
        check_shard_vocab(cfg, vocab);
        run.input(shard_path(cfg, "train"));
        run.input(shard_path(cfg, "test"));
        const auto train_docs = load_shard(shard_path(cfg, "train"));
        const auto test_docs = load_shard(shard_path(cfg, "test"));

        EncoderParams<T> params;
        if (cfg.mode == InitMode::cont) {
            run.input(cfg.paths.init_checkpoint);
            params = load_compatible_checkpoint<T>(cfg.paths.init_checkpoint, vocab);
            params.remove_heads();
        } else {
            Rng rng(stream_seed(cfg.seed, "init"));
            params = EncoderParams<T>::initialized(EncoderConfig::preset(cfg.preset, vocab.size()), rng);
        }
        run.summary()["encoder"] = params.config;

        const std::size_t log_every = std::max<std::size_t>(1, cfg.pretrain.steps / 20);
        PretrainHooks<T> hooks;
        hooks.on_step = [&](const TraceRow& r) {
            trace.push_back(r);
            if (r.step % log_every == 0)
                log(opt, "pretrain: step " + std::to_string(r.step) + "/" + std::to_string(cfg.pretrain.steps) +
                             " loss " + std::to_string(r.loss) + " lr " + std::to_string(r.lr));
        };
        hooks.on_eval = [&](const EvalRow& r) {
            evals.push_back(r);
            log(opt, "pretrain: eval at step " + std::to_string(r.step) + " ppl " + std::to_string(r.ppl));
        };
        hooks.on_checkpoint = [&](std::size_t step, const EncoderParams<T>& p, const OptimizerState<T>& o) {
            const std::string name = step == cfg.pretrain.steps ? "checkpoint.dlm"
                                                                 : "checkpoint-" + std::to_string(step) + ".dlm";
            Checkpoint<T> ck{p, o, step, vocab.hash()};
            save_checkpoint(run.dir() / name, ck);
            run.output_file(name);
            last_checkpoint = name;
        };
        pretrain(std::move(params), train_docs, test_docs, cfg.pretrain, hooks);
        write_traces();
        if (!evals.empty()) {
            run.summary()["initial_ppl"] = evals.front().ppl;
            run.summary()["final_ppl"] = evals.back().ppl;
        }
        run.summary()["steps"] = cfg.pretrain.steps;
    } catch (const std::exception& e) {
        if (!trace.empty()) write_traces();
        run.summary()["last_good_checkpoint"] = last_checkpoint ? nlohmann::json(*last_checkpoint) : nlohmann::json(nullptr);
        run.fail(e.what());
        throw;
    }
    run.finish();
}

inline void pretrain_stage(const RunConfig& cfg, const CommandOptions& opt) {
    with_precision(cfg, [&](auto tag) { pretrain_impl<decltype(tag)>(cfg, opt); });
}

/// Table 2 shape: models as columns, casing as the row label, three decimals.
inline std::string ppl_table(const std::string& model, Casing casing, double ppl) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", ppl);
    return "casing," + detail::csv_field(model) + "\n" + std::string(to_string(casing)) + "," + buf + "\n";
}

template <class T>
void eval_ppl_impl(const RunConfig& cfg, const CommandOptions& opt) {
    StageRun run("eval-ppl", cfg, cfg.stage_dir("eval"));
    staged(run, [&] {
        const auto ck_path = opt.checkpoint.value_or(final_checkpoint_path(cfg));
        const std::string split = opt.split.value_or("holdout");
        if (split != "holdout" && split != "test") throw ConfigError("--split must be holdout or test");
        run.input(vocab_path(cfg));
        run.input(ck_path);
        run.input(shard_path(cfg, split));
        const auto vocab = load_stage_vocab(cfg);
        check_shard_vocab(cfg, vocab);
        const auto params = load_compatible_checkpoint<T>(ck_path, vocab);
        const auto docs = load_shard(shard_path(cfg, split));
        if (docs.empty())
            throw DataError("the " + split + " split is empty" +
                            (split == "holdout" ? " (1% of each source's test portion rounds to zero); use --split test"
                                                : ""));
        const auto h = heldout_perplexity(params, docs, cfg.pretrain.packing.max_len_phase1, cfg.pretrain.packing.mask_prob,
                                          cfg.seed, cfg.pretrain.eval_batch_size);
        const auto table = ppl_table(cfg.model_name(), cfg.casing, h.ppl);
        run.output("ppl_table.csv", table);
        nlohmann::json result = {{"model", cfg.model_name()}, {"casing", to_string(cfg.casing)}, {"split", split},
                                 {"ppl", h.ppl},              {"loss", h.loss},                  {"targets", h.targets},
                                 {"max_len", cfg.pretrain.packing.max_len_phase1}};
        run.output("ppl.json", result.dump(2) + "\n");
        run.summary() = result;
        std::cout << table;
    });
}

inline void eval_ppl(const RunConfig& cfg, const CommandOptions& opt) {
    with_precision(cfg, [&](auto tag) { eval_ppl_impl<decltype(tag)>(cfg, opt); });
}

inline std::vector<Significance> significance_against(const MetricsReport& report,
                                                      const std::vector<fs::path>& baselines, StageRun& run) {
    std::vector<Significance> out;
    for (const auto& b : baselines) {
        run.input(b);
        out.push_back(compare_reports(report, metrics_report_from_json(read_json(b))));
    }
    return out;
}

inline std::string report_text(const MetricsReport& r) {
    return r.model + " " + r.task + " " + r.metric + " " + mean_pm_std(r.mean, r.std);
}

template <class T>
void finetune_impl(const RunConfig& cfg, const CommandOptions& opt, bool full_grid) {
    const auto& f = cfg.finetune;
    const std::string command = full_grid ? "sweep" : "finetune";
    StageRun run(command, cfg, cfg.stage_dir(command) / f.task);
    staged(run, [&] {
        const auto ck_path = opt.checkpoint.value_or(final_checkpoint_path(cfg));
        RunConfig::require_exists("paths.task_dir", cfg.paths.task_dir);
        const auto spec = TaskSpec::standard(f.task, cfg.paths.task_dir);
        run.input(vocab_path(cfg));
        run.input(ck_path);
        for (const auto& p : {spec.train, spec.dev, spec.test}) run.input(p);
        const auto vocab = load_stage_vocab(cfg);
        const auto params = load_compatible_checkpoint<T>(ck_path, vocab);
        const auto data = load_task(spec);
        run.output("manifest.json", task_manifest(data).dump(2) + "\n");

        FinetuneOptions options;
        options.warmup_fraction = f.warmup_fraction;
        options.adam = cfg.pretrain.adam;
        const auto grid = full_grid ? f.grid.points() : std::vector<GridPoint>{f.point};
        std::vector<nlohmann::json> runs, timings;
        auto result = sweep(params, vocab, data, grid, f.seeds, cfg.model_name(), options, [&](const RunResult& r) {
            runs.push_back(to_json_value(r));
            timings.push_back({{"point", r.point.label()}, {"seed", r.seed}, {"wall_seconds", r.wall_seconds}});
            log(opt, command + ": " + r.point.label() + " seed " + std::to_string(r.seed) + " dev " +
                         std::to_string(r.dev_metric) + " test " + std::to_string(r.test_metric));
        });
        result.report.significance = significance_against(result.report, f.baselines, run);
        nlohmann::json points = nlohmann::json::array();
        for (const auto& p : result.points) {
            nlohmann::json failures = nlohmann::json::array();
            for (const auto& [seed, msg] : p.failures) failures.push_back({{"seed", seed}, {"error", msg}});
            points.push_back({{"point", to_json_value(p.point)},
                              {"mean_dev", p.mean_dev},
                              {"runs", p.runs.size()},
                              {"skipped", p.skipped},
                              {"failures", failures}});
        }
        run.output("runs.jsonl", jsonl(runs));
        run.output("points.json", points.dump(2) + "\n");
        run.output("report.json", to_json_value(result.report).dump(2) + "\n");
        run.output("timings.jsonl", jsonl(timings));
        run.summary() = {{"mean", result.report.mean}, {"std", result.report.std}, {"grid_points", grid.size()}};
        std::cout << report_text(result.report) << "\n";
    });
}

inline void finetune_stage(const RunConfig& cfg, const CommandOptions& opt) {
    with_precision(cfg, [&](auto tag) { finetune_impl<decltype(tag)>(cfg, opt, false); });
}

inline void sweep_stage(const RunConfig& cfg, const CommandOptions& opt) {
    with_precision(cfg, [&](auto tag) { finetune_impl<decltype(tag)>(cfg, opt, true); });
}

/// Source embeddings for the ablation clustering under the configured embedder.
template <class T>
std::vector<SourceEmbedding> ablation_embeddings(const RunConfig& cfg, const CommandOptions& opt, const Corpus& corpus,
                                                 StageRun& run) {
    const auto& a = cfg.ablation;
    const auto by_source = sentences_by_source(corpus);
    std::vector<SourceEmbedding> out;
    if (a.embedder == "file") {
        RunConfig::require_exists("ablation.vector_file", a.vector_file);
        run.input(a.vector_file);
        const auto vectors = load_vector_file(a.vector_file);
        for (const auto& [source, vs] : vectors) {
            // Sample vector indices with the same seeded sampler used for sentences.
            std::vector<std::string> keys(vs.size());
            for (std::size_t i = 0; i < vs.size(); ++i) keys[i] = std::to_string(i);
            const SentenceEmbedder lookup = [&vs](const std::vector<std::string>& ks) {
                std::vector<std::vector<double>> r;
                for (const auto& k : ks) r.push_back(vs[std::stoul(k)]);
                return r;
            };
            out.push_back(embed_source(source, keys, lookup, a.sample_n, cfg.seed));
        }
        return out;
    }
    if (a.embedder == "checkpoint") {
        const auto ck_path = opt.checkpoint.value_or(final_checkpoint_path(cfg));
        run.input(vocab_path(cfg));
        run.input(ck_path);
        const auto vocab = load_stage_vocab(cfg);
        const auto params = load_compatible_checkpoint<T>(ck_path, vocab);
        const auto embed = encoder_mean_pool(params, vocab, cfg.pretrain.packing.max_len_phase1);
        for (const auto& [source, sentences] : by_source)
            out.push_back(embed_source(source, sentences, embed, a.sample_n, cfg.seed));
        return out;
    }
    const auto embed = hashed_bag_of_words(a.dim, cfg.casing);
    for (const auto& [source, sentences] : by_source)
        out.push_back(embed_source(source, sentences, embed, a.sample_n, cfg.seed));
    return out;
}

template <class T>
void ablate_impl(const RunConfig& cfg, const CommandOptions& opt) {
    StageRun run("ablate", cfg, cfg.stage_dir("ablation"));
    staged(run, [&] {
        const auto corpora = load_split_corpora(cfg, run);
        const auto embeddings = ablation_embeddings<T>(cfg, opt, corpora.train, run);
        if (embeddings.size() < 2) throw DataError("ablation needs at least two sources");
        for (const auto& e : embeddings)
            if (e.near_zero) log(opt, "warning: source '" + e.source + "' has a near-zero mean embedding");
        const auto d = cosine_distance_matrix(embeddings);
        const auto assignment = agglomerative_cluster(d, cfg.ablation.threshold, cfg.ablation.linkage);
        run.output("clusters.json", clusters_json(embeddings, d, assignment).dump(2) + "\n");
        const auto by_source = assignment_by_source(embeddings, assignment);
        nlohmann::json corpora_json = nlohmann::json::array();
        for (std::size_t k = 0; k < assignment.clusters; ++k) {
            const auto ab = leave_one_cluster_out(corpora.train, by_source, k);
            const std::string name = "without-cluster-" + std::to_string(k) + ".jsonl";
            run.output(name, corpus_to_jsonl(ab.corpus));
            corpora_json.push_back({{"cluster", k},
                                    {"file", name},
                                    {"excluded_sources", ab.excluded_sources},
                                    {"retained_sources", ab.retained_sources},
                                    {"documents", ab.corpus.size()}});
        }
        run.output("ablation_corpora.json", corpora_json.dump(2) + "\n");
        run.summary() = {{"clusters", assignment.clusters}, {"assignment", by_source}};
        for (const auto& [s, k] : by_source) std::cout << s << "\t" << k << "\n";
    });
}

inline void ablate(const RunConfig& cfg, const CommandOptions& opt) {
    with_precision(cfg, [&](auto tag) { ablate_impl<decltype(tag)>(cfg, opt); });
}

/// Leaderboard over metrics reports plus paired t-tests of every model against each
/// named baseline on the tasks both cover.
inline void report(const RunConfig& cfg, const CommandOptions& opt) {
    StageRun run("report", cfg, cfg.stage_dir("report"));
    staged(run, [&] {
        if (opt.reports.empty()) throw ConfigError("report: at least one metrics report is required");
        std::vector<MetricsReport> reports;
        for (const auto& p : opt.reports) {
            run.input(p);
            reports.push_back(metrics_report_from_json(read_json(p)));
        }
        nlohmann::json sig = nlohmann::json::array();
        for (const auto& base_name : opt.baselines) {
            bool found = false;
            for (const auto& base : reports) {
                if (base.model != base_name) continue;
                found = true;
                for (const auto& r : reports) {
                    if (r.model == base_name || r.task != base.task) continue;
                    const auto s = compare_reports(r, base);
                    auto j = to_json_value(s.test);
                    j["model"] = r.model;
                    j["task"] = r.task;
                    j["baseline"] = base_name;
                    sig.push_back(j);
                }
            }
            if (!found) throw ConfigError("report: baseline '" + base_name + "' matches no report");
        }
        const auto table = leaderboard_csv(reports);
        run.output("leaderboard.csv", table);
        run.output("significance.json", sig.dump(2) + "\n");
        std::cout << table;
        if (!sig.empty()) std::cout << sig.dump(2) << "\n";
    });
}

/// Bundled synthetic data: a raw 8-source debate corpus, a general-text corpus for
/// reference vocabularies and donor models, and the four toy tasks.
inline void gen_toy(const CommandOptions& opt, std::uint64_t seed) {
    const fs::path out = opt.out;
    std::string corpus;
    for (const auto& d : synthetic::debate_documents({.seed = seed})) corpus += nlohmann::json(d).dump() + "\n";
    write_file_atomic(out / "corpus.jsonl", corpus);

    std::string general;
    const auto sentences = synthetic::general_sentences(2400, seed + 6);
    for (std::size_t i = 0; i < sentences.size(); i += 6) {
        std::string text;
        for (std::size_t k = i; k < std::min(sentences.size(), i + 6); ++k) text += (k > i ? " " : "") + sentences[k];
        general += nlohmann::json{{"id", "general/" + std::to_string(i / 6)}, {"source", "general"}, {"text", text}}.dump() + "\n";
    }
    write_file_atomic(out / "general.jsonl", general);

    auto split3 = [](auto all, std::size_t n_train, std::size_t n_dev) {
        using V = decltype(all);
        return std::array<V, 3>{V(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train)),
                                V(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                                  all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev)),
                                V(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), all.end())};
    };
    const char* names[3] = {"train", "dev", "test"};
    const auto sentiment = split3(synthetic::sentiment_examples(60, 60, seed + 1), 80, 20);
    const auto relation = split3(synthetic::relation_examples(120, seed + 2), 80, 20);
    const auto ner = split3(synthetic::ner_sentences(120, seed + 3), 80, 20);
    const auto arg = split3(synthetic::argument_sentences(120, seed + 4), 80, 20);
    for (int i = 0; i < 3; ++i) {
        write_file_atomic(out / "tasks/sentiment" / (std::string(names[i]) + ".jsonl"), synthetic::to_jsonl(sentiment[i]));
        write_file_atomic(out / "tasks/arg_relation" / (std::string(names[i]) + ".jsonl"), synthetic::to_jsonl(relation[i]));
        write_file_atomic(out / "tasks/ner" / (std::string(names[i]) + ".conll"), synthetic::to_conll(ner[i]));
        write_file_atomic(out / "tasks/arg_component" / (std::string(names[i]) + ".conll"), synthetic::to_conll(arg[i]));
    }
    log(opt, "gen-toy: wrote " + out.string());
}

}  // namespace debatelm::cli
