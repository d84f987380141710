#pragma once

// Masked-language-model pre-training: two-phase sequence-length schedule, AdamW with
// linear warmup/decay, periodic held-out perplexity, and checkpoint hooks.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/checkpoint.hpp"
#include "debatelm/encoder.hpp"
#include "debatelm/error.hpp"
#include "debatelm/metrics.hpp"
#include "debatelm/mlm.hpp"
#include "debatelm/optim.hpp"

namespace debatelm {

enum class InitMode { scr, cont };

inline std::string_view to_string(InitMode m) { return m == InitMode::cont ? "cont" : "scr"; }

inline InitMode parse_init_mode(std::string_view s) {
    if (s == "cont") return InitMode::cont;
    if (s == "scr") return InitMode::scr;
    throw ConfigError("mode must be 'cont' or 'scr', got '" + std::string(s) + "'");
}

struct PretrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 32;
    double peak_lr = 1e-4;
    std::size_t warmup_steps = 10000;
    AdamConfig adam;
    double clip_norm = 1.0;  // 0 disables clipping
    PackingConfig packing;
    std::size_t eval_every = 0;  // 0: evaluate only at step 0 and at the end
    std::size_t eval_batch_size = 32;
    std::size_t checkpoint_every = 0;  // 0: only the final checkpoint

    LinearSchedule schedule() const { return {peak_lr, std::min(warmup_steps, steps), steps}; }

    void validate() const {
        packing.validate();
        if (batch_size == 0) throw ConfigError("pretrain.batch_size must be positive");
        if (!(peak_lr > 0.0)) throw ConfigError("pretrain.peak_lr must be positive");
        if (clip_norm < 0.0) throw ConfigError("pretrain.clip_norm must be non-negative");
        if (eval_batch_size == 0) throw ConfigError("pretrain.eval_batch_size must be positive");
    }
};

struct TraceRow {
    std::size_t step = 0;
    double lr = 0.0;
    std::size_t max_len = 0;
    std::size_t cols = 0;  // trimmed batch width actually computed
    double loss = 0.0;
    std::size_t targets = 0;
    double grad_norm = 0.0;  // before clipping
};

struct EvalRow {
    std::size_t step = 0;
    double loss = 0.0;  // mean NLL over held-out targets
    double ppl = 0.0;
    std::size_t targets = 0;
};

struct HeldoutResult {
    double loss = 0.0;
    double ppl = 0.0;
    std::size_t targets = 0;
};

/// Masked perplexity with fixed evaluation masks: the same documents, seed and length
/// always select the same targets, so models are compared on identical positions.
template <class T>
HeldoutResult heldout_perplexity(const EncoderParams<T>& params, const std::vector<std::vector<int>>& documents,
                                 std::size_t max_len, double mask_prob, std::uint64_t seed, std::size_t batch_size) {
    std::vector<double> nll;
    for (const auto& batch : evaluation_batches(documents, params.config.vocab_size, max_len, mask_prob, seed, batch_size)) {
        const auto part = mlm_target_nll(params, batch);
        nll.insert(nll.end(), part.begin(), part.end());
    }
    if (nll.empty()) throw DataError("held-out set has no masked targets");
    HeldoutResult r;
    r.targets = nll.size();
    double sum = 0.0;
    for (double x : nll) sum += x;
    r.loss = sum / static_cast<double>(nll.size());
    r.ppl = perplexity(nll);
    return r;
}

template <class T>
struct PretrainResult {
    EncoderParams<T> params;
    OptimizerState<T> optimizer;
    std::vector<TraceRow> trace;
    std::vector<EvalRow> evals;
};

template <class T>
struct PretrainHooks {
    std::function<void(const TraceRow&)> on_step;
    std::function<void(const EvalRow&)> on_eval;
    /// Called every checkpoint_every steps and after the final step.
    std::function<void(std::size_t step, const EncoderParams<T>&, const OptimizerState<T>&)> on_checkpoint;
};

/// Runs steps 1..S.  Step t uses lr_at(t) and max length 128-phase for t ≤ ⌊0.8·S⌋.
/// A non-finite loss or gradient raises NumericError naming the step; checkpoints
/// already handed to on_checkpoint are the last good state.
template <class T>
PretrainResult<T> pretrain(EncoderParams<T> params, const std::vector<std::vector<int>>& train_docs,
                           const std::vector<std::vector<int>>& heldout_docs, const PretrainConfig& cfg,
                           const PretrainHooks<T>& hooks = {}) {
    cfg.validate();
    if (params.config.max_position < std::max(cfg.packing.max_len_phase1, cfg.packing.max_len_phase2))
        throw ConfigError("max sequence length exceeds the encoder's positional capacity");
    const auto schedule = cfg.schedule();
    PretrainResult<T> out{std::move(params), {}, {}, {}};
    out.optimizer = OptimizerState<T>::for_params(out.params, cfg.adam, schedule);

    const std::size_t V = out.params.config.vocab_size;
    auto evaluate = [&](std::size_t step) {
        if (heldout_docs.empty()) return;
        const auto h = heldout_perplexity(out.params, heldout_docs, cfg.packing.max_len_phase1, cfg.packing.mask_prob,
                                          cfg.packing.seed, cfg.eval_batch_size);
        out.evals.push_back({step, h.loss, h.ppl, h.targets});
        if (hooks.on_eval) hooks.on_eval(out.evals.back());
    };
    evaluate(0);
    if (cfg.steps == 0) return out;

    MlmBatchStream stream(train_docs, V, cfg.packing, cfg.batch_size, cfg.steps);
    Rng dropout_rng(stream_seed(cfg.packing.seed, "dropout"));
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        const auto batch = stream.next(step);
        auto grads = out.params.zero_gradients();
        TraceRow row;
        row.step = step;
        row.lr = lr_at(step, schedule);
        row.max_len = stream.max_len_for_step(step);
        row.cols = batch.cols;
        try {
            const auto lv = mlm_loss_and_grad(out.params, batch, &grads, 1.0, {true, &dropout_rng});
            row.loss = lv.loss;
            row.targets = lv.count;
            row.grad_norm = clip_global_norm(grads, cfg.clip_norm);
            if (lv.count > 0) adam_step(out.params, grads, out.optimizer, row.lr);
        } catch (const NumericError& e) {
            throw NumericError("step " + std::to_string(step) + ": " + e.what());
        }
        out.trace.push_back(row);
        if (hooks.on_step) hooks.on_step(row);
        if (cfg.eval_every && step % cfg.eval_every == 0 && step != cfg.steps) evaluate(step);
        if (hooks.on_checkpoint && cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != cfg.steps)
            hooks.on_checkpoint(step, out.params, out.optimizer);
    }
    evaluate(cfg.steps);
    if (hooks.on_checkpoint) hooks.on_checkpoint(cfg.steps, out.params, out.optimizer);
    return out;
}

inline nlohmann::json to_json_value(const TraceRow& r) {
    return {{"step", r.step},       {"lr", r.lr},           {"max_len", r.max_len}, {"cols", r.cols},
            {"loss", r.loss},       {"targets", r.targets}, {"grad_norm", r.grad_norm}};
}

inline nlohmann::json to_json_value(const EvalRow& r) {
    return {{"step", r.step}, {"loss", r.loss}, {"ppl", r.ppl}, {"targets", r.targets}};
}

}  // namespace debatelm
