#pragma once

// Linear warmup / linear decay schedule and Adam with decoupled weight decay.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "debatelm/encoder.hpp"
#include "debatelm/error.hpp"

namespace debatelm {

struct LinearSchedule {
    double peak_lr = 1e-4;
    std::size_t warmup_steps = 10000;
    std::size_t total_steps = 150000;
};

/// 0 → peak over the warmup steps, then linearly down to 0 at total_steps; 0 beyond.
inline double lr_at(std::size_t step, const LinearSchedule& s) {
    if (step > s.total_steps) return 0.0;
    if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    if (s.total_steps == s.warmup_steps) return s.peak_lr;
    return s.peak_lr * static_cast<double>(s.total_steps - step) /
           static_cast<double>(s.total_steps - s.warmup_steps);
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

template <class T>
struct OptimizerState {
    AdamConfig adam;
    LinearSchedule schedule;
    std::uint64_t t = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;

    static OptimizerState for_params(const EncoderParams<T>& params, AdamConfig adam, LinearSchedule schedule) {
        OptimizerState s;
        s.adam = adam;
        s.schedule = schedule;
        s.m = params.zero_gradients();
        s.v = params.zero_gradients();
        return s;
    }

    /// Match moments to a parameter set that has grown (e.g. a new classification head).
    void resize_for(const EncoderParams<T>& params) {
        m.resize(params.tensors.size());
        v.resize(params.tensors.size());
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            m[i].resize(params.tensors[i].size(), T(0));
            v[i].resize(params.tensors[i].size(), T(0));
        }
    }
};

/// Global L2 norm of all gradients.
template <class T>
double global_norm(const Gradients<T>& grads) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (T x : g) sq += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(sq);
}

/// Scale gradients so their global norm is at most max_norm; returns the pre-clip norm.
template <class T>
double clip_global_norm(Gradients<T>& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& g : grads)
            for (T& x : g) x *= s;
    }
    return norm;
}

/// Increment t, then p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p (decay only on tensors flagged for it).
template <class T>
void adam_step(EncoderParams<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr) {
    if (grads.size() != params.tensors.size() || state.m.size() != params.tensors.size())
        throw ConfigError("gradient/optimizer state does not match the parameter set");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].size() != params.tensors[i].size() || state.m[i].size() != grads[i].size())
            throw ConfigError("shape mismatch for tensor '" + params.tensors[i].name + "'");
        if (!kernel::all_finite<T>(grads[i]))
            throw NumericError("non-finite gradient for tensor '" + params.tensors[i].name + "'");
    }
    ++state.t;
    const auto& a = state.adam;
    const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto& p = params.tensors[i];
        const double decay = p.decay ? a.weight_decay : 0.0;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = static_cast<double>(grads[i][j]);
            const double mj = a.beta1 * static_cast<double>(m[j]) + (1.0 - a.beta1) * g;
            const double vj = a.beta2 * static_cast<double>(v[j]) + (1.0 - a.beta2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            const double pj = static_cast<double>(p.value[j]);
            p.value[j] = static_cast<T>(pj - lr * (mhat / (std::sqrt(vhat) + a.eps)) - lr * decay * pj);
        }
    }
}

}  // namespace debatelm
