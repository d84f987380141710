#pragma once

// Row-major dense matrices and the three GEMM shapes the encoder needs.  Every output
// element is accumulated in a fixed order, so results are bitwise stable for any thread
// count.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <span>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace debatelm {

template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

    T* row(std::size_t i) { return data.data() + i * cols; }
    const T* row(std::size_t i) const { return data.data() + i * cols; }
    T& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
    void resize(std::size_t r, std::size_t c) {
        rows = r;
        cols = c;
        data.assign(r * c, T(0));
    }
};

/// Thread count for the GEMM kernels, from DEBATELM_THREADS (default: OpenMP default).
inline void configure_threads_from_env() {
#ifdef _OPENMP
    if (const char* env = std::getenv("DEBATELM_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
#endif
}

namespace kernel {

inline constexpr std::size_t kParallelThreshold = 1 << 16;

/// C(m×n) (+)= A(m×k) · B(k×n)
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const auto mi = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
    for (std::ptrdiff_t ii = 0; ii < mi; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        T* crow = c + i * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class T>
void transpose(const T* src, T* dst, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

/// C(m×n) (+)= A(m×k) · B(n×k)ᵀ
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    std::vector<T> bt(k * n);
    transpose(b, bt.data(), n, k);
    gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

/// C(m×n) (+)= A(k×m)ᵀ · B(k×n)
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    const auto mi = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n > kParallelThreshold)
    for (std::ptrdiff_t ii = 0; ii < mi; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        T* crow = c + i * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[p * m + i];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// Column sums of A(m×n) added into out(n).
template <class T>
void add_column_sums(const T* a, T* out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
}

template <class T>
void add_row_bias(T* a, const T* bias, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) a[i * n + j] += bias[j];
}

template <class T>
bool all_finite(std::span<const T> v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

}  // namespace kernel
}  // namespace debatelm
