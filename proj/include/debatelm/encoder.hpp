#pragma once

// Post-LN transformer encoder (BERT layout) with an MLM head tied to the word embeddings,
// a pooler, and optional sequence/token classification heads.  Forward and reverse passes
// are written out by hand; both are templated on the scalar type so gradient checks can
// run in double precision while training defaults to float.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "debatelm/error.hpp"
#include "debatelm/mlm.hpp"
#include "debatelm/rng.hpp"
#include "debatelm/tensor.hpp"

namespace debatelm {

struct EncoderConfig {
    std::size_t layers = 2;
    std::size_t hidden = 64;
    std::size_t heads = 4;
    std::size_t intermediate = 256;
    std::size_t max_position = 512;
    std::size_t vocab_size = 0;
    std::size_t type_vocab_size = 2;
    double dropout = 0.0;
    double layer_norm_eps = 1e-12;

    std::size_t head_dim() const { return hidden / heads; }

    /// base = (12, 768, 12), large = (24, 1024, 16), toy = (2, 64, 4); intermediate = 4·hidden.
    static EncoderConfig preset(std::string_view name, std::size_t vocab_size) {
        EncoderConfig c;
        if (name == "base") {
            c.layers = 12, c.hidden = 768, c.heads = 12, c.dropout = 0.1;
        } else if (name == "large") {
            c.layers = 24, c.hidden = 1024, c.heads = 16, c.dropout = 0.1;
        } else if (name == "toy") {
            c.layers = 2, c.hidden = 64, c.heads = 4, c.dropout = 0.1;
        } else {
            throw ConfigError("unknown architecture preset '" + std::string(name) + "' (expected toy, base or large)");
        }
        c.intermediate = 4 * c.hidden;
        c.max_position = 512;
        c.vocab_size = vocab_size;
        return c;
    }

    void validate() const {
        if (layers < 1) throw ConfigError("encoder needs at least one layer");
        if (heads == 0 || hidden % heads != 0) throw ConfigError("hidden size must be divisible by the head count");
        if (vocab_size <= static_cast<std::size_t>(Special::count)) throw ConfigError("vocab_size too small");
        if (max_position < 2) throw ConfigError("max_position must be at least 2");
        if (type_vocab_size < 1) throw ConfigError("type_vocab_size must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    }

    bool operator==(const EncoderConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = {{"layers", c.layers},         {"hidden", c.hidden},
         {"heads", c.heads},           {"intermediate", c.intermediate},
         {"max_position", c.max_position}, {"vocab_size", c.vocab_size},
         {"type_vocab_size", c.type_vocab_size}, {"dropout", c.dropout},
         {"layer_norm_eps", c.layer_norm_eps}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
    j.at("layers").get_to(c.layers);
    j.at("hidden").get_to(c.hidden);
    j.at("heads").get_to(c.heads);
    j.at("intermediate").get_to(c.intermediate);
    j.at("max_position").get_to(c.max_position);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("type_vocab_size").get_to(c.type_vocab_size);
    j.at("dropout").get_to(c.dropout);
    j.at("layer_norm_eps").get_to(c.layer_norm_eps);
}

template <class T>
struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<T> value;
    bool decay = true;  // weight decay applies (false for biases and layer-norm parameters)

    std::size_t size() const { return value.size(); }
};

/// One gradient buffer per parameter tensor, same order and sizes.
template <class T>
using Gradients = std::vector<std::vector<T>>;

enum class Init { normal, zero, one };

template <class T>
class EncoderParams {
public:
    struct LayerIndex {
        std::size_t wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
    };
    struct Index {
        std::size_t word, position, type, emb_ln_g, emb_ln_b;
        std::vector<LayerIndex> layers;
        std::size_t mlm_w, mlm_b, mlm_ln_g, mlm_ln_b, mlm_bias;
        std::size_t pool_w, pool_b;
        std::optional<std::size_t> seq_w, seq_b, tok_w, tok_b;
    };

    EncoderConfig config;
    std::vector<Tensor<T>> tensors;
    Index idx{};

    static constexpr double kInitStddev = 0.02;

    /// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    static EncoderParams initialized(const EncoderConfig& config, Rng& rng) { return build(config, &rng); }

    /// Every tensor zero (including layer-norm gains).
    static EncoderParams zeros(const EncoderConfig& config) { return build(config, nullptr); }

    /// Rebuild from named tensors (e.g. a checkpoint).  Shapes are checked against `config`.
    static EncoderParams from_tensors(const EncoderConfig& config, std::vector<Tensor<T>> tensors) {
        EncoderParams p;
        p.config = config;
        p.tensors = std::move(tensors);
        p.reindex();
        return p;
    }

    void add_sequence_head(std::size_t num_labels, Rng& rng) {
        add("seq_head.weight", {config.hidden, num_labels}, Init::normal, &rng);
        add("seq_head.bias", {num_labels}, Init::zero, &rng);
        reindex();
    }

    void add_token_head(std::size_t num_labels, Rng& rng) {
        add("tok_head.weight", {config.hidden, num_labels}, Init::normal, &rng);
        add("tok_head.bias", {num_labels}, Init::zero, &rng);
        reindex();
    }

    /// Drop classification heads (e.g. when a fine-tuning run starts from a pre-trained checkpoint).
    void remove_heads() {
        std::erase_if(tensors, [](const Tensor<T>& t) {
            return t.name.starts_with("seq_head.") || t.name.starts_with("tok_head.");
        });
        reindex();
    }

    std::size_t sequence_labels() const { return idx.seq_b ? tensors[*idx.seq_b].size() : 0; }
    std::size_t token_labels() const { return idx.tok_b ? tensors[*idx.tok_b].size() : 0; }

    const T* data(std::size_t i) const { return tensors[i].value.data(); }
    T* data(std::size_t i) { return tensors[i].value.data(); }

    const Tensor<T>* find(std::string_view name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }

    Gradients<T> zero_gradients() const {
        Gradients<T> g;
        g.reserve(tensors.size());
        for (const auto& t : tensors) g.emplace_back(t.size(), T(0));
        return g;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& t : tensors)
            if (!kernel::all_finite<T>(t.value)) return false;
        return true;
    }

    template <class U>
    EncoderParams<U> cast() const {
        std::vector<Tensor<U>> out;
        out.reserve(tensors.size());
        for (const auto& t : tensors)
            out.push_back({t.name, t.shape, std::vector<U>(t.value.begin(), t.value.end()), t.decay});
        return EncoderParams<U>::from_tensors(config, std::move(out));
    }

    void reindex() {
        std::unordered_map<std::string, std::size_t> by_name;
        for (std::size_t i = 0; i < tensors.size(); ++i)
            if (!by_name.emplace(tensors[i].name, i).second)
                throw DataError("duplicate parameter tensor '" + tensors[i].name + "'");
        const std::size_t H = config.hidden, I = config.intermediate, V = config.vocab_size;
        auto need = [&](const std::string& name, std::vector<std::size_t> shape) {
            const auto it = by_name.find(name);
            if (it == by_name.end()) throw DataError("missing parameter tensor '" + name + "'");
            if (tensors[it->second].shape != shape) throw DataError("shape mismatch for parameter tensor '" + name + "'");
            std::size_t n = 1;
            for (auto s : shape) n *= s;
            if (tensors[it->second].value.size() != n) throw DataError("size mismatch for parameter tensor '" + name + "'");
            return it->second;
        };
        auto maybe = [&](const std::string& name) -> std::optional<std::size_t> {
            const auto it = by_name.find(name);
            if (it == by_name.end()) return std::nullopt;
            return it->second;
        };
        Index x{};
        x.word = need("embeddings.word", {V, H});
        x.position = need("embeddings.position", {config.max_position, H});
        x.type = need("embeddings.token_type", {config.type_vocab_size, H});
        x.emb_ln_g = need("embeddings.ln.gamma", {H});
        x.emb_ln_b = need("embeddings.ln.beta", {H});
        for (std::size_t l = 0; l < config.layers; ++l) {
            const std::string p = "layer." + std::to_string(l) + ".";
            LayerIndex li{};
            li.wq = need(p + "attn.q.weight", {H, H});
            li.bq = need(p + "attn.q.bias", {H});
            li.wk = need(p + "attn.k.weight", {H, H});
            li.bk = need(p + "attn.k.bias", {H});
            li.wv = need(p + "attn.v.weight", {H, H});
            li.bv = need(p + "attn.v.bias", {H});
            li.wo = need(p + "attn.o.weight", {H, H});
            li.bo = need(p + "attn.o.bias", {H});
            li.ln1_g = need(p + "attn.ln.gamma", {H});
            li.ln1_b = need(p + "attn.ln.beta", {H});
            li.w1 = need(p + "ffn.in.weight", {H, I});
            li.b1 = need(p + "ffn.in.bias", {I});
            li.w2 = need(p + "ffn.out.weight", {I, H});
            li.b2 = need(p + "ffn.out.bias", {H});
            li.ln2_g = need(p + "ffn.ln.gamma", {H});
            li.ln2_b = need(p + "ffn.ln.beta", {H});
            x.layers.push_back(li);
        }
        x.mlm_w = need("mlm.transform.weight", {H, H});
        x.mlm_b = need("mlm.transform.bias", {H});
        x.mlm_ln_g = need("mlm.ln.gamma", {H});
        x.mlm_ln_b = need("mlm.ln.beta", {H});
        x.mlm_bias = need("mlm.decoder.bias", {V});
        x.pool_w = need("pooler.weight", {H, H});
        x.pool_b = need("pooler.bias", {H});
        x.seq_w = maybe("seq_head.weight");
        x.seq_b = maybe("seq_head.bias");
        x.tok_w = maybe("tok_head.weight");
        x.tok_b = maybe("tok_head.bias");
        if (x.seq_w.has_value() != x.seq_b.has_value() || x.tok_w.has_value() != x.tok_b.has_value())
            throw DataError("classification head is missing its weight or bias");
        if (x.seq_w && (tensors[*x.seq_w].shape.size() != 2 || tensors[*x.seq_w].shape[0] != H ||
                        tensors[*x.seq_b].size() != tensors[*x.seq_w].shape[1]))
            throw DataError("sequence head shape mismatch");
        if (x.tok_w && (tensors[*x.tok_w].shape.size() != 2 || tensors[*x.tok_w].shape[0] != H ||
                        tensors[*x.tok_b].size() != tensors[*x.tok_w].shape[1]))
            throw DataError("token head shape mismatch");
        idx = std::move(x);
    }

private:
    void add(std::string name, std::vector<std::size_t> shape, Init init, Rng* rng) {
        Tensor<T> t;
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        t.decay = init == Init::normal;
        t.name = std::move(name);
        t.shape = std::move(shape);
        t.value.assign(n, T(0));
        if (rng != nullptr) {
            if (init == Init::normal)
                for (auto& v : t.value) v = static_cast<T>(rng->truncated_normal(kInitStddev));
            else if (init == Init::one)
                std::fill(t.value.begin(), t.value.end(), T(1));
        }
        tensors.push_back(std::move(t));
    }

    static EncoderParams build(const EncoderConfig& config, Rng* rng) {
        config.validate();
        EncoderParams p;
        p.config = config;
        const std::size_t H = config.hidden, I = config.intermediate, V = config.vocab_size;
        p.add("embeddings.word", {V, H}, Init::normal, rng);
        p.add("embeddings.position", {config.max_position, H}, Init::normal, rng);
        p.add("embeddings.token_type", {config.type_vocab_size, H}, Init::normal, rng);
        p.add("embeddings.ln.gamma", {H}, Init::one, rng);
        p.add("embeddings.ln.beta", {H}, Init::zero, rng);
        for (std::size_t l = 0; l < config.layers; ++l) {
            const std::string pre = "layer." + std::to_string(l) + ".";
            for (const char* m : {"q", "k", "v", "o"}) {
                p.add(pre + "attn." + m + ".weight", {H, H}, Init::normal, rng);
                p.add(pre + "attn." + m + ".bias", {H}, Init::zero, rng);
            }
            p.add(pre + "attn.ln.gamma", {H}, Init::one, rng);
            p.add(pre + "attn.ln.beta", {H}, Init::zero, rng);
            p.add(pre + "ffn.in.weight", {H, I}, Init::normal, rng);
            p.add(pre + "ffn.in.bias", {I}, Init::zero, rng);
            p.add(pre + "ffn.out.weight", {I, H}, Init::normal, rng);
            p.add(pre + "ffn.out.bias", {H}, Init::zero, rng);
            p.add(pre + "ffn.ln.gamma", {H}, Init::one, rng);
            p.add(pre + "ffn.ln.beta", {H}, Init::zero, rng);
        }
        p.add("mlm.transform.weight", {H, H}, Init::normal, rng);
        p.add("mlm.transform.bias", {H}, Init::zero, rng);
        p.add("mlm.ln.gamma", {H}, Init::one, rng);
        p.add("mlm.ln.beta", {H}, Init::zero, rng);
        p.add("mlm.decoder.bias", {V}, Init::zero, rng);
        p.add("pooler.weight", {H, H}, Init::normal, rng);
        p.add("pooler.bias", {H}, Init::zero, rng);
        p.reindex();
        return p;
    }
};

namespace detail {

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <class T>
struct LayerNormCache {
    Matrix<T> xhat;
    std::vector<T> rstd;
};

template <class T>
void layer_norm_forward(const Matrix<T>& x, const T* gamma, const T* beta, double eps, Matrix<T>& y,
                        LayerNormCache<T>& cache) {
    const std::size_t n = x.cols;
    y.resize(x.rows, n);
    cache.xhat.resize(x.rows, n);
    cache.rstd.assign(x.rows, T(0));
    for (std::size_t r = 0; r < x.rows; ++r) {
        const T* xr = x.row(r);
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= T(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= T(n);
        const T rstd = T(1) / std::sqrt(var + T(eps));
        cache.rstd[r] = rstd;
        T* xh = cache.xhat.row(r);
        T* yr = y.row(r);
        for (std::size_t j = 0; j < n; ++j) {
            xh[j] = (xr[j] - mean) * rstd;
            yr[j] = gamma[j] * xh[j] + beta[j];
        }
    }
}

// dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)), dxhat = dy * gamma.
template <class T>
void layer_norm_backward(const Matrix<T>& dy, const LayerNormCache<T>& cache, const T* gamma, T* dgamma, T* dbeta,
                         Matrix<T>& dx) {
    const std::size_t n = dy.cols;
    dx.resize(dy.rows, n);
    std::vector<T> dxhat(n);
    for (std::size_t r = 0; r < dy.rows; ++r) {
        const T* dyr = dy.row(r);
        const T* xh = cache.xhat.row(r);
        T mean_d = 0, mean_dx = 0;
        for (std::size_t j = 0; j < n; ++j) {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= T(n);
        mean_dx /= T(n);
        T* dxr = dx.row(r);
        for (std::size_t j = 0; j < n; ++j) dxr[j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
    }
}

/// y = x W + b, W is (in × out).
template <class T>
void linear_forward(const Matrix<T>& x, const T* w, const T* b, std::size_t out, Matrix<T>& y) {
    y.resize(x.rows, out);
    kernel::gemm_nn(x.data.data(), w, y.data.data(), x.rows, x.cols, out, false);
    if (b) kernel::add_row_bias(y.data.data(), b, x.rows, out);
}

/// Accumulates dW, db; writes dx (or accumulates into it when `accumulate_dx`).
template <class T>
void linear_backward(const Matrix<T>& x, const Matrix<T>& dy, const T* w, T* dw, T* db, Matrix<T>* dx,
                     bool accumulate_dx = false) {
    kernel::gemm_tn(x.data.data(), dy.data.data(), dw, x.cols, x.rows, dy.cols, true);
    if (db) kernel::add_column_sums(dy.data.data(), db, dy.rows, dy.cols);
    if (dx) {
        if (!accumulate_dx) dx->resize(x.rows, x.cols);
        kernel::gemm_nt(dy.data.data(), w, dx->data.data(), dy.rows, dy.cols, x.cols, accumulate_dx);
    }
}

/// Mean-free cross-entropy of one row; writes softmax - onehot scaled by `gscale` when `dlogits`.
template <class T>
double softmax_cross_entropy(const T* logits, std::size_t n, int label, T* dlogits, T gscale) {
    T maxv = logits[0];
    for (std::size_t j = 1; j < n; ++j) maxv = std::max(maxv, logits[j]);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += std::exp(logits[j] - maxv);
    const T lse = maxv + std::log(sum);
    const T nll = lse - logits[static_cast<std::size_t>(label)];
    if (dlogits) {
        for (std::size_t j = 0; j < n; ++j) dlogits[j] = std::exp(logits[j] - lse) * gscale;
        dlogits[static_cast<std::size_t>(label)] -= gscale;
    }
    return static_cast<double>(nll);
}

template <class T>
void check_finite(const Matrix<T>& m, const std::string& where) {
    if (!kernel::all_finite<T>(m.data)) throw NumericError("non-finite activation in " + where);
}

}  // namespace detail

struct ForwardOptions {
    bool training = false;  // enables dropout when config.dropout > 0
    Rng* dropout_rng = nullptr;
};

/// Encoder forward pass over a batch, retaining every activation the reverse pass needs.
template <class T>
class EncoderPass {
public:
    EncoderPass(const EncoderParams<T>& params, const MaskedBatch& batch, ForwardOptions options = {})
        : p_(params), batch_(batch) {
        const auto& c = params.config;
        rows_ = batch.rows;
        cols_ = batch.cols;
        tokens_ = rows_ * cols_;
        if (cols_ > c.max_position)
            throw DataError("sequence length " + std::to_string(cols_) + " exceeds max_position " +
                            std::to_string(c.max_position));
        dropout_ = options.training ? c.dropout : 0.0;
        if (dropout_ > 0.0 && options.dropout_rng == nullptr) throw ConfigError("dropout requires an rng");
        rng_ = options.dropout_rng;
        embed();
        layers_.resize(c.layers);
        const Matrix<T>* x = &x0_;
        for (std::size_t l = 0; l < c.layers; ++l) {
            layer_forward(l, *x);
            x = &layers_[l].out;
        }
    }

    const Matrix<T>& hidden() const { return layers_.empty() ? x0_ : layers_.back().out; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    /// Accumulate parameter gradients given d(loss)/d(hidden).
    void backward(const Matrix<T>& d_hidden, Gradients<T>& grads) const {
        Matrix<T> dx = d_hidden;
        for (std::size_t l = p_.config.layers; l-- > 0;) dx = layer_backward(l, dx, grads);
        embed_backward(dx, grads);
    }

private:
    struct LayerCache {
        const Matrix<T>* input = nullptr;
        Matrix<T> q, k, v, ctx, attn, x1, h_pre, h, ffn, out;
        std::vector<T> probs;      // (rows × heads × cols × cols), softmax over unmasked keys
        std::vector<T> probs_dropped;
        std::vector<T> attn_mask, ffn_mask;  // dropout scale per element (empty when off)
        detail::LayerNormCache<T> ln1, ln2;
    };

    std::vector<T> dropout_mask(std::size_t n) {
        std::vector<T> m;
        if (dropout_ <= 0.0) return m;
        m.resize(n);
        const T keep_scale = T(1.0 / (1.0 - dropout_));
        for (auto& v : m) v = rng_->uniform() < dropout_ ? T(0) : keep_scale;
        return m;
    }

    static void apply_mask(Matrix<T>& x, const std::vector<T>& mask) {
        if (mask.empty()) return;
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= mask[i];
    }

    void embed() {
        const auto& c = p_.config;
        const std::size_t H = c.hidden;
        Matrix<T> e(tokens_, H);
        const T* word = p_.data(p_.idx.word);
        const T* pos = p_.data(p_.idx.position);
        const T* type = p_.data(p_.idx.type);
        for (std::size_t r = 0; r < tokens_; ++r) {
            const int id = batch_.input_ids[r];
            if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
                throw DataError("token id " + std::to_string(id) + " out of range");
            const int tt = batch_.token_type.empty() ? 0 : batch_.token_type[r];
            if (tt < 0 || static_cast<std::size_t>(tt) >= c.type_vocab_size) throw DataError("token type out of range");
            const std::size_t pidx = r % cols_;
            T* er = e.row(r);
            const T* wr = word + static_cast<std::size_t>(id) * H;
            const T* pr = pos + pidx * H;
            const T* tr = type + static_cast<std::size_t>(tt) * H;
            for (std::size_t j = 0; j < H; ++j) er[j] = wr[j] + pr[j] + tr[j];
        }
        detail::layer_norm_forward(e, p_.data(p_.idx.emb_ln_g), p_.data(p_.idx.emb_ln_b), c.layer_norm_eps, x0_, emb_ln_);
        emb_mask_ = dropout_mask(x0_.data.size());
        apply_mask(x0_, emb_mask_);
        detail::check_finite(x0_, "embeddings");
    }

    void embed_backward(Matrix<T> dx0, Gradients<T>& g) const {
        const auto& c = p_.config;
        const std::size_t H = c.hidden;
        apply_mask(dx0, emb_mask_);
        Matrix<T> de;
        detail::layer_norm_backward(dx0, emb_ln_, p_.data(p_.idx.emb_ln_g), g[p_.idx.emb_ln_g].data(),
                                    g[p_.idx.emb_ln_b].data(), de);
        T* gw = g[p_.idx.word].data();
        T* gp = g[p_.idx.position].data();
        T* gt = g[p_.idx.type].data();
        for (std::size_t r = 0; r < tokens_; ++r) {
            const auto id = static_cast<std::size_t>(batch_.input_ids[r]);
            const auto tt = static_cast<std::size_t>(batch_.token_type.empty() ? 0 : batch_.token_type[r]);
            const std::size_t pidx = r % cols_;
            const T* dr = de.row(r);
            for (std::size_t j = 0; j < H; ++j) {
                gw[id * H + j] += dr[j];
                gp[pidx * H + j] += dr[j];
                gt[tt * H + j] += dr[j];
            }
        }
    }

    void attention_forward(LayerCache& lc) {
        const auto& c = p_.config;
        const std::size_t H = c.hidden, nh = c.heads, dh = c.head_dim(), L = cols_;
        const T scale = T(1) / std::sqrt(T(dh));
        lc.probs.assign(rows_ * nh * L * L, T(0));
        lc.ctx.resize(tokens_, H);
        const bool drop = dropout_ > 0.0;
        if (drop) {
            lc.probs_dropped = dropout_mask(lc.probs.size());
        }
        for (std::size_t b = 0; b < rows_; ++b) {
            const int* mask = batch_.attention_mask.data() + b * L;
            for (std::size_t h = 0; h < nh; ++h) {
                for (std::size_t i = 0; i < L; ++i) {
                    T* prow = lc.probs.data() + ((b * nh + h) * L + i) * L;
                    const T* qi = lc.q.row(b * L + i) + h * dh;
                    T maxv = -std::numeric_limits<T>::infinity();
                    bool any = false;
                    for (std::size_t j = 0; j < L; ++j) {
                        if (!mask[j]) continue;
                        const T* kj = lc.k.row(b * L + j) + h * dh;
                        T s = 0;
                        for (std::size_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
                        s *= scale;
                        prow[j] = s;
                        maxv = std::max(maxv, s);
                        any = true;
                    }
                    T* ci = lc.ctx.row(b * L + i) + h * dh;
                    if (!any) continue;
                    T sum = 0;
                    for (std::size_t j = 0; j < L; ++j) {
                        if (!mask[j]) continue;
                        prow[j] = std::exp(prow[j] - maxv);
                        sum += prow[j];
                    }
                    for (std::size_t j = 0; j < L; ++j)
                        if (mask[j]) prow[j] /= sum;
                    T* drow = drop ? lc.probs_dropped.data() + ((b * nh + h) * L + i) * L : nullptr;
                    for (std::size_t j = 0; j < L; ++j) {
                        if (!mask[j]) continue;
                        T pj = prow[j];
                        if (drop) {
                            drow[j] *= pj;  // mask scale times probability
                            pj = drow[j];
                        }
                        const T* vj = lc.v.row(b * L + j) + h * dh;
                        for (std::size_t d = 0; d < dh; ++d) ci[d] += pj * vj[d];
                    }
                }
            }
        }
    }

    void attention_backward(const LayerCache& lc, const Matrix<T>& dctx, Matrix<T>& dq, Matrix<T>& dk,
                            Matrix<T>& dv) const {
        const auto& c = p_.config;
        const std::size_t H = c.hidden, nh = c.heads, dh = c.head_dim(), L = cols_;
        const T scale = T(1) / std::sqrt(T(dh));
        dq.resize(tokens_, H);
        dk.resize(tokens_, H);
        dv.resize(tokens_, H);
        const bool drop = !lc.probs_dropped.empty();
        const T keep_scale = drop ? T(1.0 / (1.0 - dropout_)) : T(1);
        std::vector<T> dp(L);
        for (std::size_t b = 0; b < rows_; ++b) {
            const int* mask = batch_.attention_mask.data() + b * L;
            for (std::size_t h = 0; h < nh; ++h) {
                for (std::size_t i = 0; i < L; ++i) {
                    const T* prow = lc.probs.data() + ((b * nh + h) * L + i) * L;
                    const T* drow = drop ? lc.probs_dropped.data() + ((b * nh + h) * L + i) * L : nullptr;
                    const T* dci = dctx.row(b * L + i) + h * dh;
                    T dot_sum = 0;
                    for (std::size_t j = 0; j < L; ++j) {
                        dp[j] = 0;
                        if (!mask[j]) continue;
                        const T* vj = lc.v.row(b * L + j) + h * dh;
                        T* dvj = dv.row(b * L + j) + h * dh;
                        T dpd = 0;
                        for (std::size_t d = 0; d < dh; ++d) dpd += dci[d] * vj[d];
                        const T pd = drop ? drow[j] : prow[j];
                        for (std::size_t d = 0; d < dh; ++d) dvj[d] += pd * dci[d];
                        // d(pd)/d(p) is the dropout scale (0 or 1/keep); recover it from pd/p.
                        T dpj = dpd;
                        if (drop) dpj = (prow[j] != T(0) && drow[j] != T(0)) ? dpd * keep_scale : T(0);
                        dp[j] = dpj;
                        dot_sum += dpj * prow[j];
                    }
                    const T* qi = lc.q.row(b * L + i) + h * dh;
                    T* dqi = dq.row(b * L + i) + h * dh;
                    for (std::size_t j = 0; j < L; ++j) {
                        if (!mask[j]) continue;
                        const T ds = prow[j] * (dp[j] - dot_sum) * scale;
                        const T* kj = lc.k.row(b * L + j) + h * dh;
                        T* dkj = dk.row(b * L + j) + h * dh;
                        for (std::size_t d = 0; d < dh; ++d) {
                            dqi[d] += ds * kj[d];
                            dkj[d] += ds * qi[d];
                        }
                    }
                }
            }
        }
    }

    void layer_forward(std::size_t l, const Matrix<T>& x) {
        const auto& c = p_.config;
        const auto& li = p_.idx.layers[l];
        auto& lc = layers_[l];
        const std::size_t H = c.hidden, I = c.intermediate;
        lc.input = &x;
        detail::linear_forward(x, p_.data(li.wq), p_.data(li.bq), H, lc.q);
        detail::linear_forward(x, p_.data(li.wk), p_.data(li.bk), H, lc.k);
        detail::linear_forward(x, p_.data(li.wv), p_.data(li.bv), H, lc.v);
        attention_forward(lc);
        detail::linear_forward(lc.ctx, p_.data(li.wo), p_.data(li.bo), H, lc.attn);
        lc.attn_mask = dropout_mask(lc.attn.data.size());
        apply_mask(lc.attn, lc.attn_mask);
        Matrix<T> r1 = lc.attn;
        for (std::size_t i = 0; i < r1.data.size(); ++i) r1.data[i] += x.data[i];
        detail::layer_norm_forward(r1, p_.data(li.ln1_g), p_.data(li.ln1_b), c.layer_norm_eps, lc.x1, lc.ln1);
        detail::linear_forward(lc.x1, p_.data(li.w1), p_.data(li.b1), I, lc.h_pre);
        lc.h.resize(tokens_, I);
        for (std::size_t i = 0; i < lc.h.data.size(); ++i) lc.h.data[i] = detail::gelu(lc.h_pre.data[i]);
        detail::linear_forward(lc.h, p_.data(li.w2), p_.data(li.b2), H, lc.ffn);
        lc.ffn_mask = dropout_mask(lc.ffn.data.size());
        apply_mask(lc.ffn, lc.ffn_mask);
        Matrix<T> r2 = lc.ffn;
        for (std::size_t i = 0; i < r2.data.size(); ++i) r2.data[i] += lc.x1.data[i];
        detail::layer_norm_forward(r2, p_.data(li.ln2_g), p_.data(li.ln2_b), c.layer_norm_eps, lc.out, lc.ln2);
        detail::check_finite(lc.out, "encoder layer " + std::to_string(l));
    }

    Matrix<T> layer_backward(std::size_t l, const Matrix<T>& dout, Gradients<T>& g) const {
        const auto& li = p_.idx.layers[l];
        const auto& lc = layers_[l];
        Matrix<T> dr2;
        detail::layer_norm_backward(dout, lc.ln2, p_.data(li.ln2_g), g[li.ln2_g].data(), g[li.ln2_b].data(), dr2);
        Matrix<T> dx1 = dr2;
        Matrix<T> dffn = dr2;
        apply_mask(dffn, lc.ffn_mask);
        Matrix<T> dh;
        detail::linear_backward(lc.h, dffn, p_.data(li.w2), g[li.w2].data(), g[li.b2].data(), &dh);
        for (std::size_t i = 0; i < dh.data.size(); ++i) dh.data[i] *= detail::gelu_grad(lc.h_pre.data[i]);
        detail::linear_backward(lc.x1, dh, p_.data(li.w1), g[li.w1].data(), g[li.b1].data(), &dx1, true);
        Matrix<T> dr1;
        detail::layer_norm_backward(dx1, lc.ln1, p_.data(li.ln1_g), g[li.ln1_g].data(), g[li.ln1_b].data(), dr1);
        Matrix<T> dx = dr1;
        Matrix<T> dattn = dr1;
        apply_mask(dattn, lc.attn_mask);
        Matrix<T> dctx;
        detail::linear_backward(lc.ctx, dattn, p_.data(li.wo), g[li.wo].data(), g[li.bo].data(), &dctx);
        Matrix<T> dq, dk, dv;
        attention_backward(lc, dctx, dq, dk, dv);
        detail::linear_backward(*lc.input, dq, p_.data(li.wq), g[li.wq].data(), g[li.bq].data(), &dx, true);
        detail::linear_backward(*lc.input, dk, p_.data(li.wk), g[li.wk].data(), g[li.bk].data(), &dx, true);
        detail::linear_backward(*lc.input, dv, p_.data(li.wv), g[li.wv].data(), g[li.bv].data(), &dx, true);
        return dx;
    }

    const EncoderParams<T>& p_;
    const MaskedBatch& batch_;
    std::size_t rows_ = 0, cols_ = 0, tokens_ = 0;
    double dropout_ = 0.0;
    Rng* rng_ = nullptr;
    Matrix<T> x0_;
    detail::LayerNormCache<T> emb_ln_;
    std::vector<T> emb_mask_;
    std::vector<LayerCache> layers_;
};

/// MLM prediction head (dense → GELU → LayerNorm → tied decoder) over selected hidden rows.
template <class T>
class MlmHead {
public:
    MlmHead(const EncoderParams<T>& p, const Matrix<T>& hidden, std::vector<std::size_t> rows)
        : p_(p), rows_(std::move(rows)) {
        const std::size_t H = p.config.hidden, V = p.config.vocab_size;
        x_.resize(rows_.size(), H);
        for (std::size_t m = 0; m < rows_.size(); ++m) std::copy_n(hidden.row(rows_[m]), H, x_.row(m));
        detail::linear_forward(x_, p.data(p.idx.mlm_w), p.data(p.idx.mlm_b), H, pre_);
        act_.resize(pre_.rows, H);
        for (std::size_t i = 0; i < act_.data.size(); ++i) act_.data[i] = detail::gelu(pre_.data[i]);
        detail::layer_norm_forward(act_, p.data(p.idx.mlm_ln_g), p.data(p.idx.mlm_ln_b), p.config.layer_norm_eps, t_, ln_);
        logits_.resize(rows_.size(), V);
        kernel::gemm_nt(t_.data.data(), p.data(p.idx.word), logits_.data.data(), t_.rows, H, V, false);
        kernel::add_row_bias(logits_.data.data(), p.data(p.idx.mlm_bias), logits_.rows, V);
        detail::check_finite(logits_, "mlm head");
    }

    const Matrix<T>& logits() const { return logits_; }
    const std::vector<std::size_t>& rows() const { return rows_; }

    /// Backpropagate d(loss)/d(logits) into parameter gradients and scatter into d_hidden.
    void backward(const Matrix<T>& dlogits, Gradients<T>& g, Matrix<T>& d_hidden) const {
        const auto& p = p_;
        const std::size_t H = p.config.hidden, V = p.config.vocab_size;
        kernel::add_column_sums(dlogits.data.data(), g[p.idx.mlm_bias].data(), dlogits.rows, V);
        kernel::gemm_tn(dlogits.data.data(), t_.data.data(), g[p.idx.word].data(), V, dlogits.rows, H, true);
        Matrix<T> dt(dlogits.rows, H);
        kernel::gemm_nn(dlogits.data.data(), p.data(p.idx.word), dt.data.data(), dlogits.rows, V, H, false);
        Matrix<T> dact;
        detail::layer_norm_backward(dt, ln_, p.data(p.idx.mlm_ln_g), g[p.idx.mlm_ln_g].data(), g[p.idx.mlm_ln_b].data(),
                                    dact);
        for (std::size_t i = 0; i < dact.data.size(); ++i) dact.data[i] *= detail::gelu_grad(pre_.data[i]);
        Matrix<T> dx;
        detail::linear_backward(x_, dact, p.data(p.idx.mlm_w), g[p.idx.mlm_w].data(), g[p.idx.mlm_b].data(), &dx);
        for (std::size_t m = 0; m < rows_.size(); ++m) {
            T* dst = d_hidden.row(rows_[m]);
            const T* src = dx.row(m);
            for (std::size_t j = 0; j < H; ++j) dst[j] += src[j];
        }
    }

private:
    const EncoderParams<T>& p_;
    std::vector<std::size_t> rows_;
    Matrix<T> x_, pre_, act_, t_, logits_;
    detail::LayerNormCache<T> ln_;
};

template <class T>
struct ForwardOutput {
    std::size_t rows = 0, cols = 0, vocab = 0;
    std::vector<T> logits;  // rows × cols × vocab
    Matrix<T> pooled;       // rows × hidden
};

namespace detail {
template <class T>
Matrix<T> pool(const EncoderParams<T>& p, const Matrix<T>& hidden, std::size_t rows, std::size_t cols,
               Matrix<T>* cls_out = nullptr) {
    const std::size_t H = p.config.hidden;
    Matrix<T> cls(rows, H);
    for (std::size_t b = 0; b < rows; ++b) std::copy_n(hidden.row(b * cols), H, cls.row(b));
    Matrix<T> pooled;
    linear_forward(cls, p.data(p.idx.pool_w), p.data(p.idx.pool_b), H, pooled);
    for (auto& v : pooled.data) v = std::tanh(v);
    if (cls_out) *cls_out = std::move(cls);
    return pooled;
}
}  // namespace detail

/// Vocabulary logits at every position plus the pooled CLS representation.
template <class T>
ForwardOutput<T> forward(const EncoderParams<T>& params, const MaskedBatch& batch, ForwardOptions options = {}) {
    EncoderPass<T> pass(params, batch, options);
    std::vector<std::size_t> all(batch.rows * batch.cols);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    MlmHead<T> head(params, pass.hidden(), std::move(all));
    ForwardOutput<T> out;
    out.rows = batch.rows;
    out.cols = batch.cols;
    out.vocab = params.config.vocab_size;
    out.logits = head.logits().data;
    out.pooled = detail::pool(params, pass.hidden(), batch.rows, batch.cols);
    return out;
}

struct LossValue {
    double loss = 0.0;
    std::size_t count = 0;
};

/// Mean cross-entropy over positions whose label is not the sentinel.
template <class T>
LossValue mlm_loss(std::span<const T> logits, std::size_t vocab, std::span<const int> labels) {
    if (logits.size() != labels.size() * vocab) throw DataError("logits and labels disagree in size");
    LossValue lv;
    double sum = 0.0;
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] == kIgnoreLabel) continue;
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= vocab) throw DataError("label out of range");
        sum += detail::softmax_cross_entropy<T>(logits.data() + r * vocab, vocab, labels[r], nullptr, T(0));
        ++lv.count;
    }
    lv.loss = lv.count ? sum / static_cast<double>(lv.count) : 0.0;
    return lv;
}

namespace detail {
inline std::vector<std::size_t> target_rows(std::span<const int> labels) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] != kIgnoreLabel) rows.push_back(i);
    return rows;
}
}  // namespace detail

/// MLM loss restricted to target positions; accumulates `scale` × d(loss)/d(params) into
/// `grads` when non-null.  Zero targets → loss 0, count 0, no gradient.
template <class T>
LossValue mlm_loss_and_grad(const EncoderParams<T>& params, const MaskedBatch& batch, Gradients<T>* grads,
                            double scale = 1.0, ForwardOptions options = {}, std::vector<double>* nll_out = nullptr) {
    EncoderPass<T> pass(params, batch, options);
    auto rows = detail::target_rows(batch.labels);
    LossValue lv;
    lv.count = rows.size();
    if (rows.empty()) return lv;
    MlmHead<T> head(params, pass.hidden(), rows);
    const std::size_t V = params.config.vocab_size;
    Matrix<T> dlogits;
    if (grads) dlogits.resize(rows.size(), V);
    const T gscale = T(scale / static_cast<double>(rows.size()));
    double sum = 0.0;
    for (std::size_t m = 0; m < rows.size(); ++m) {
        const int label = batch.labels[rows[m]];
        if (label < 0 || static_cast<std::size_t>(label) >= V) throw DataError("label out of range");
        const double nll = detail::softmax_cross_entropy<T>(head.logits().row(m), V, label,
                                                            grads ? dlogits.row(m) : nullptr, gscale);
        if (nll_out) nll_out->push_back(nll);
        sum += nll;
    }
    lv.loss = sum / static_cast<double>(rows.size());
    if (!std::isfinite(lv.loss)) throw NumericError("non-finite MLM loss");
    if (grads) {
        Matrix<T> dh(pass.hidden().rows, pass.hidden().cols);
        head.backward(dlogits, *grads, dh);
        pass.backward(dh, *grads);
    }
    return lv;
}

/// Exact gradients of the mean MLM loss for every parameter tensor.
template <class T>
Gradients<T> backward(const EncoderParams<T>& params, const MaskedBatch& batch, double scale = 1.0) {
    auto g = params.zero_gradients();
    mlm_loss_and_grad(params, batch, &g, scale);
    return g;
}

/// Per-target negative log-likelihoods (input for perplexity).
template <class T>
std::vector<double> mlm_target_nll(const EncoderParams<T>& params, const MaskedBatch& batch) {
    std::vector<double> nll;
    mlm_loss_and_grad<T>(params, batch, nullptr, 1.0, {}, &nll);
    return nll;
}

/// Sequence classification: pooled CLS → linear head, mean cross-entropy over rows.
/// `predictions` (optional) receives the argmax label per row.
template <class T>
LossValue sequence_classification_loss_and_grad(const EncoderParams<T>& params, const MaskedBatch& batch,
                                                std::span<const int> labels, Gradients<T>* grads, double scale = 1.0,
                                                ForwardOptions options = {}, std::vector<int>* predictions = nullptr) {
    if (!params.idx.seq_w) throw ConfigError("encoder has no sequence classification head");
    const std::size_t C = params.sequence_labels(), H = params.config.hidden, B = batch.rows;
    if (labels.size() != B) throw DataError("one label per row required");
    EncoderPass<T> pass(params, batch, options);
    Matrix<T> cls;
    Matrix<T> pooled = detail::pool(params, pass.hidden(), B, batch.cols, &cls);
    Matrix<T> logits;
    detail::linear_forward(pooled, params.data(*params.idx.seq_w), params.data(*params.idx.seq_b), C, logits);
    detail::check_finite(logits, "sequence head");
    Matrix<T> dlogits;
    if (grads) dlogits.resize(B, C);
    LossValue lv;
    double sum = 0.0;
    std::size_t counted = 0;
    for (std::size_t b = 0; b < B; ++b) if (labels[b] != kIgnoreLabel) ++counted;
    const T gscale = counted ? T(scale / static_cast<double>(counted)) : T(0);
    for (std::size_t b = 0; b < B; ++b) {
        if (predictions) {
            const T* lr = logits.row(b);
            predictions->push_back(static_cast<int>(std::max_element(lr, lr + C) - lr));
        }
        if (labels[b] == kIgnoreLabel) continue;
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C) throw DataError("label out of range");
        sum += detail::softmax_cross_entropy<T>(logits.row(b), C, labels[b], grads ? dlogits.row(b) : nullptr, gscale);
    }
    lv.count = counted;
    lv.loss = counted ? sum / static_cast<double>(counted) : 0.0;
    if (grads && counted) {
        auto& g = *grads;
        Matrix<T> dpooled;
        detail::linear_backward(pooled, dlogits, params.data(*params.idx.seq_w), g[*params.idx.seq_w].data(),
                                g[*params.idx.seq_b].data(), &dpooled);
        for (std::size_t i = 0; i < dpooled.data.size(); ++i)
            dpooled.data[i] *= T(1) - pooled.data[i] * pooled.data[i];
        Matrix<T> dcls;
        detail::linear_backward(cls, dpooled, params.data(params.idx.pool_w), g[params.idx.pool_w].data(),
                                g[params.idx.pool_b].data(), &dcls);
        Matrix<T> dh(pass.hidden().rows, H);
        for (std::size_t b = 0; b < B; ++b) std::copy_n(dcls.row(b), H, dh.row(b * batch.cols));
        pass.backward(dh, g);
    }
    return lv;
}

/// Token classification over positions with a label in batch.labels.  `predictions`
/// (optional) receives the argmax label at every position (rows × cols).
template <class T>
LossValue token_classification_loss_and_grad(const EncoderParams<T>& params, const MaskedBatch& batch,
                                             Gradients<T>* grads, double scale = 1.0, ForwardOptions options = {},
                                             std::vector<int>* predictions = nullptr) {
    if (!params.idx.tok_w) throw ConfigError("encoder has no token classification head");
    const std::size_t C = params.token_labels();
    EncoderPass<T> pass(params, batch, options);
    Matrix<T> logits;
    detail::linear_forward(pass.hidden(), params.data(*params.idx.tok_w), params.data(*params.idx.tok_b), C, logits);
    detail::check_finite(logits, "token head");
    if (predictions) {
        predictions->resize(logits.rows);
        for (std::size_t r = 0; r < logits.rows; ++r) {
            const T* lr = logits.row(r);
            (*predictions)[r] = static_cast<int>(std::max_element(lr, lr + C) - lr);
        }
    }
    const auto rows = detail::target_rows(batch.labels);
    LossValue lv;
    lv.count = rows.size();
    if (rows.empty()) return lv;
    Matrix<T> dlogits;
    if (grads) dlogits.resize(logits.rows, C);
    const T gscale = T(scale / static_cast<double>(rows.size()));
    double sum = 0.0;
    for (auto r : rows) {
        const int label = batch.labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= C) throw DataError("label out of range");
        sum += detail::softmax_cross_entropy<T>(logits.row(r), C, label, grads ? dlogits.row(r) : nullptr, gscale);
    }
    lv.loss = sum / static_cast<double>(rows.size());
    if (grads) {
        auto& g = *grads;
        Matrix<T> dh;
        detail::linear_backward(pass.hidden(), dlogits, params.data(*params.idx.tok_w), g[*params.idx.tok_w].data(),
                                g[*params.idx.tok_b].data(), &dh);
        pass.backward(dh, g);
    }
    return lv;
}

/// Final-layer hidden states, rows × cols × hidden.
template <class T>
Matrix<T> hidden_states(const EncoderParams<T>& params, const MaskedBatch& batch) {
    EncoderPass<T> pass(params, batch);
    return pass.hidden();
}

}  // namespace debatelm
