#pragma once

// Run configuration: one INI file (top-level keys plus [section] blocks) with
// `section.key=value` overrides that win over file values.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "debatelm/ablation.hpp"
#include "debatelm/error.hpp"
#include "debatelm/finetune.hpp"
#include "debatelm/hash.hpp"
#include "debatelm/pretrain.hpp"
#include "debatelm/wordpiece.hpp"

namespace debatelm {

struct PathsConfig {
    std::filesystem::path corpus;           // raw input for ingest (.jsonl or directory of .txt)
    std::filesystem::path work = "runs";    // stage artifacts live in work/<stage>/
    std::filesystem::path vocab;            // inherited vocabulary (cont) or reference vocabulary
    std::filesystem::path init_checkpoint;  // donor checkpoint (cont)
    std::filesystem::path task_dir;         // finetune/sweep data: <task_dir>/{train,dev,test}.*
};

struct TokenizerConfig {
    std::size_t budget = 0;
    std::vector<std::string> report_words = {"deterrent", "endorse", "bureaucrat"};
};

struct FinetuneConfig {
    std::string task = "sentiment";
    GridPoint point;  // `finetune` runs this single point
    HyperGrid grid;   // `sweep` runs the full product
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
    double warmup_fraction = 0.1;
    std::vector<std::filesystem::path> baselines;  // metrics reports to test against
};

struct AblationConfig {
    std::string embedder = "hashed";  // hashed | checkpoint | file
    std::filesystem::path vector_file;
    std::size_t sample_n = 10000;
    std::size_t dim = 512;
    double threshold = 0.2;
    Linkage linkage = Linkage::average;
};

struct RunConfig {
    std::uint64_t seed = 1;
    InitMode mode = InitMode::scr;
    Casing casing = Casing::uncased;
    std::string preset = "toy";
    std::string precision = "float";  // float | double
    std::string model;                // defaults to debatelm-<mode>-<casing>
    PathsConfig paths;
    std::vector<std::string> drop_patterns;
    TokenizerConfig tokenizer;
    PretrainConfig pretrain;
    FinetuneConfig finetune;
    AblationConfig ablation;

    std::string model_name() const {
        return model.empty() ? "debatelm-" + std::string(to_string(mode)) + "-" + std::string(to_string(casing)) : model;
    }

    std::filesystem::path stage_dir(std::string_view stage) const { return paths.work / std::string(stage); }

    /// cont needs a donor checkpoint and its vocabulary; scr needs a vocabulary budget.
    void validate_mode() const {
        if (mode == InitMode::cont) {
            if (paths.init_checkpoint.empty()) throw ConfigError("paths.init_checkpoint: required for mode = cont");
            if (paths.vocab.empty()) throw ConfigError("paths.vocab: required for mode = cont");
            require_exists("paths.init_checkpoint", paths.init_checkpoint);
            require_exists("paths.vocab", paths.vocab);
        } else if (tokenizer.budget == 0) {
            throw ConfigError("tokenizer.budget: required (positive) for mode = scr");
        }
    }

    static void require_exists(std::string_view field, const std::filesystem::path& p) {
        if (p.empty()) throw ConfigError(std::string(field) + ": required");
        if (!std::filesystem::exists(p)) throw ConfigError(std::string(field) + ": no such file or directory: " + p.string());
    }
};

namespace detail {

using boost::property_tree::ptree;

template <class T>
T parse_number(const std::string& field, const std::string& text) {
    std::istringstream in(text);
    T v{};
    in >> v;
    if (in.fail() || !(in >> std::ws).eof()) throw ConfigError(field + ": cannot parse '" + text + "' as a number");
    if constexpr (std::is_unsigned_v<T>)
        if (text.find('-') != std::string::npos) throw ConfigError(field + ": must be non-negative, got '" + text + "'");
    return v;
}

template <class T>
std::vector<T> parse_list(const std::string& field, const std::string& text) {
    std::vector<T> out;
    std::istringstream in(text);
    for (std::string item; std::getline(in, item, ',');) {
        const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
        if (b == std::string::npos) continue;
        item = item.substr(b, e - b + 1);
        if constexpr (std::is_same_v<T, std::string>)
            out.push_back(item);
        else
            out.push_back(parse_number<T>(field, item));
    }
    return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
    std::ostringstream s;
    s.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
}

class ConfigReader {
public:
    explicit ConfigReader(const ptree& tree) : tree_(tree) {}

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        const auto v = tree_.get_optional<std::string>(ptree::path_type(key, '.'));
        if (!v) return;
        try {
            out = convert<T>(key, *v);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(key + ": " + e.what());
        }
    }

    /// Every key present in the tree must have been read.
    void reject_unknown() const {
        std::vector<std::string> unknown;
        for (const auto& [k, v] : tree_) {
            if (v.empty()) {
                if (!seen_.contains(k)) unknown.push_back(k);
            } else {
                for (const auto& [k2, v2] : v)
                    if (!seen_.contains(k + "." + k2)) unknown.push_back(k + "." + k2);
            }
        }
        if (!unknown.empty()) {
            std::string msg = "unknown configuration key";
            msg += unknown.size() > 1 ? "s: " : ": ";
            for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
            throw ConfigError(msg);
        }
    }

private:
    template <class T>
    static T convert(const std::string& key, const std::string& v) {
        if constexpr (std::is_same_v<T, std::string>) return v;
        else if constexpr (std::is_same_v<T, std::filesystem::path>) return std::filesystem::path(v);
        else if constexpr (std::is_same_v<T, InitMode>) return parse_init_mode(v);
        else if constexpr (std::is_same_v<T, Casing>) return parse_casing(v);
        else if constexpr (std::is_same_v<T, Linkage>) return parse_linkage(v);
        else if constexpr (std::is_same_v<T, std::vector<std::filesystem::path>>) {
            std::vector<std::filesystem::path> out;
            for (auto& s : parse_list<std::string>(key, v)) out.emplace_back(s);
            return out;
        } else if constexpr (requires { typename T::value_type; }) return parse_list<typename T::value_type>(key, v);
        else return parse_number<T>(key, v);
    }

    const ptree& tree_;
    std::set<std::string> seen_;
};

}  // namespace detail

/// Parses `section.key=value` (or `key=value` for top-level keys) into the tree.
inline void apply_override(boost::property_tree::ptree& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    const auto key = assignment.substr(0, eq);
    if (std::count(key.begin(), key.end(), '.') > 1) throw ConfigError("override key '" + key + "' nests too deeply");
    tree.put(boost::property_tree::ptree::path_type(key, '.'), assignment.substr(eq + 1));
}

inline RunConfig config_from_tree(const boost::property_tree::ptree& tree) {
    RunConfig c;
    detail::ConfigReader r(tree);
    r.get("seed", c.seed);
    r.get("mode", c.mode);
    r.get("casing", c.casing);
    r.get("preset", c.preset);
    r.get("precision", c.precision);
    r.get("model", c.model);

    r.get("paths.corpus", c.paths.corpus);
    r.get("paths.work", c.paths.work);
    r.get("paths.vocab", c.paths.vocab);
    r.get("paths.init_checkpoint", c.paths.init_checkpoint);
    r.get("paths.task_dir", c.paths.task_dir);

    r.get("ingest.drop_patterns", c.drop_patterns);

    r.get("tokenizer.budget", c.tokenizer.budget);
    r.get("tokenizer.report_words", c.tokenizer.report_words);

    auto& p = c.pretrain;
    r.get("pretrain.steps", p.steps);
    r.get("pretrain.batch_size", p.batch_size);
    r.get("pretrain.peak_lr", p.peak_lr);
    r.get("pretrain.warmup_steps", p.warmup_steps);
    r.get("pretrain.beta1", p.adam.beta1);
    r.get("pretrain.beta2", p.adam.beta2);
    r.get("pretrain.eps", p.adam.eps);
    r.get("pretrain.weight_decay", p.adam.weight_decay);
    r.get("pretrain.clip_norm", p.clip_norm);
    r.get("pretrain.max_len_phase1", p.packing.max_len_phase1);
    r.get("pretrain.max_len_phase2", p.packing.max_len_phase2);
    r.get("pretrain.phase1_fraction", p.packing.phase1_fraction);
    r.get("pretrain.mask_prob", p.packing.mask_prob);
    r.get("pretrain.eval_every", p.eval_every);
    r.get("pretrain.eval_batch_size", p.eval_batch_size);
    r.get("pretrain.checkpoint_every", p.checkpoint_every);
    p.packing.seed = c.seed;

    auto& f = c.finetune;
    r.get("finetune.task", f.task);
    r.get("finetune.learning_rate", f.point.learning_rate);
    r.get("finetune.weight_decay", f.point.weight_decay);
    r.get("finetune.batch_size", f.point.batch_size);
    r.get("finetune.epochs", f.point.epochs);
    r.get("finetune.max_len", f.point.max_len);
    r.get("finetune.learning_rates", f.grid.learning_rates);
    r.get("finetune.weight_decays", f.grid.weight_decays);
    r.get("finetune.batch_sizes", f.grid.batch_sizes);
    r.get("finetune.epoch_counts", f.grid.epochs);
    r.get("finetune.max_lens", f.grid.max_lens);
    r.get("finetune.seeds", f.seeds);
    r.get("finetune.warmup_fraction", f.warmup_fraction);
    r.get("finetune.baselines", f.baselines);

    auto& a = c.ablation;
    r.get("ablation.embedder", a.embedder);
    r.get("ablation.vector_file", a.vector_file);
    r.get("ablation.sample_n", a.sample_n);
    r.get("ablation.dim", a.dim);
    r.get("ablation.threshold", a.threshold);
    r.get("ablation.linkage", a.linkage);
    r.reject_unknown();

    if (c.preset != "toy" && c.preset != "base" && c.preset != "large")
        throw ConfigError("preset: expected toy, base or large, got '" + c.preset + "'");
    if (c.precision != "float" && c.precision != "double")
        throw ConfigError("precision: expected float or double, got '" + c.precision + "'");
    try {
        c.pretrain.validate();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        throw ConfigError(msg.starts_with("pretrain.") ? msg : "pretrain." + msg);
    }
    if (f.seeds.empty()) throw ConfigError("finetune.seeds: at least one seed is required");
    if (f.point.batch_size == 0) throw ConfigError("finetune.batch_size: must be positive");
    if (!(f.point.learning_rate > 0.0)) throw ConfigError("finetune.learning_rate: must be positive");
    if (!(f.warmup_fraction >= 0.0 && f.warmup_fraction <= 1.0))
        throw ConfigError("finetune.warmup_fraction: must lie in [0, 1]");
    for (auto b : f.grid.batch_sizes)
        if (b == 0) throw ConfigError("finetune.batch_sizes: must be positive");
    if (a.embedder != "hashed" && a.embedder != "checkpoint" && a.embedder != "file")
        throw ConfigError("ablation.embedder: expected hashed, checkpoint or file, got '" + a.embedder + "'");
    if (!(a.threshold >= 0.0 && a.threshold <= 2.0)) throw ConfigError("ablation.threshold: must lie in [0, 2]");
    if (a.sample_n == 0) throw ConfigError("ablation.sample_n: must be positive");
    if (a.dim == 0) throw ConfigError("ablation.dim: must be positive");
    return c;
}

/// Reads the optional INI file, applies overrides in order, and validates field by field.
inline RunConfig load_config(const std::optional<std::filesystem::path>& file,
                             const std::vector<std::string>& overrides = {}) {
    boost::property_tree::ptree tree;
    if (file) {
        if (!std::filesystem::exists(*file)) throw ConfigError("config file not found: " + file->string());
        try {
            boost::property_tree::read_ini(file->string(), tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(tree, o);
    return config_from_tree(tree);
}

/// Fully resolved configuration; every field is present so the hash identifies the run.
inline nlohmann::json to_json_value(const RunConfig& c) {
    using detail::join;
    const auto& p = c.pretrain;
    const auto& f = c.finetune;
    const auto& a = c.ablation;
    std::vector<std::string> baselines;
    for (const auto& b : f.baselines) baselines.push_back(b.string());
    return {
        {"seed", c.seed},
        {"mode", to_string(c.mode)},
        {"casing", to_string(c.casing)},
        {"preset", c.preset},
        {"precision", c.precision},
        {"model", c.model_name()},
        {"paths",
         {{"corpus", c.paths.corpus.string()},
          {"work", c.paths.work.string()},
          {"vocab", c.paths.vocab.string()},
          {"init_checkpoint", c.paths.init_checkpoint.string()},
          {"task_dir", c.paths.task_dir.string()}}},
        {"ingest", {{"drop_patterns", c.drop_patterns}}},
        {"tokenizer", {{"budget", c.tokenizer.budget}, {"report_words", c.tokenizer.report_words}}},
        {"pretrain",
         {{"steps", p.steps},
          {"batch_size", p.batch_size},
          {"peak_lr", p.peak_lr},
          {"warmup_steps", p.warmup_steps},
          {"beta1", p.adam.beta1},
          {"beta2", p.adam.beta2},
          {"eps", p.adam.eps},
          {"weight_decay", p.adam.weight_decay},
          {"clip_norm", p.clip_norm},
          {"max_len_phase1", p.packing.max_len_phase1},
          {"max_len_phase2", p.packing.max_len_phase2},
          {"phase1_fraction", p.packing.phase1_fraction},
          {"mask_prob", p.packing.mask_prob},
          {"eval_every", p.eval_every},
          {"eval_batch_size", p.eval_batch_size},
          {"checkpoint_every", p.checkpoint_every}}},
        {"finetune",
         {{"task", f.task},
          {"learning_rate", f.point.learning_rate},
          {"weight_decay", f.point.weight_decay},
          {"batch_size", f.point.batch_size},
          {"epochs", f.point.epochs},
          {"max_len", f.point.max_len},
          {"learning_rates", join(f.grid.learning_rates)},
          {"weight_decays", join(f.grid.weight_decays)},
          {"batch_sizes", join(f.grid.batch_sizes)},
          {"epoch_counts", join(f.grid.epochs)},
          {"max_lens", join(f.grid.max_lens)},
          {"seeds", f.seeds},
          {"warmup_fraction", f.warmup_fraction},
          {"baselines", baselines}}},
        {"ablation",
         {{"embedder", a.embedder},
          {"vector_file", a.vector_file.string()},
          {"sample_n", a.sample_n},
          {"dim", a.dim},
          {"threshold", a.threshold},
          {"linkage", to_string(a.linkage)}}},
    };
}

inline std::string config_hash(const RunConfig& c) { return sha1_hex(to_json_value(c).dump()); }

}  // namespace debatelm
