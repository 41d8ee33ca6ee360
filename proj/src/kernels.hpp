#pragma once

// Dense row-major kernels. Every output element accumulates over the shared
// dimension in a fixed sequential order, so results do not depend on how many
// other rows are present. The finetune invariants (bitwise reductions,
// Missing-row neutrality) rely on this.

#include <cstddef>
#include <vector>

namespace periloom::kernels {

/// C[n x m] += A[n x k] * B[k x m]
template <class T>
void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
    for (std::size_t i = 0; i < n; ++i) {
        T* c = C + i * m;
        const T* a = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[p];
            const T* b = B + p * m;
            for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
        }
    }
}

/// C[k x m] += A[n x k]^T * B[n x m], accumulated row by row of A/B.
template <class T>
void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const T* __restrict A, const T* __restrict B,
             T* __restrict C) {
    for (std::size_t r = 0; r < n; ++r) {
        const T* a = A + r * k;
        const T* b = B + r * m;
        for (std::size_t i = 0; i < k; ++i) {
            const T av = a[i];
            T* c = C + i * m;
            for (std::size_t j = 0; j < m; ++j) c[j] += av * b[j];
        }
    }
}

/// out[cols x rows] = in[rows x cols]^T
template <class T>
std::vector<T> transpose(const T* in, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
    return out;
}

/// out[n x m] = bias broadcast over rows
template <class T>
void fill_bias(std::size_t n, std::size_t m, const T* bias, T* out) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] = bias[j];
}

/// acc[m] += column sums of X[n x m], row order.
template <class T>
void add_colsum(std::size_t n, std::size_t m, const T* X, T* acc) {
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) acc[j] += X[i * m + j];
}

}  // namespace periloom::kernels
