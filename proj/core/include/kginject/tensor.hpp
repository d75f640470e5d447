#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <span>
#include <vector>

namespace kginject {

// Dense row-major matrix. Vectors are stored as 1 x n matrices.
template <class T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    const T& operator()(std::size_t r, std::size_t c) const noexcept {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }

    void resize(std::size_t rows, std::size_t cols) {
        rows_ = rows;
        cols_ = cols;
        data_.assign(rows * cols, T{0});
    }
    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

// Matrix kernels. Every output element accumulates over the shared index in
// ascending order, so results are bitwise reproducible for a given build.

namespace detail {

template <class T>
struct simd {
    typedef T type __attribute__((vector_size(32)));
    static constexpr std::size_t width = 32 / sizeof(T);
};

// MR rows by two vectors of columns, accumulated in registers.
template <std::size_t MR, class T>
inline void gemm_tile(std::size_t K, const T* __restrict a, std::size_t ar, std::size_t ak, const T* __restrict b,
                      std::size_t ldb, T* __restrict out, std::size_t ldo, bool accumulate) {
    using V = typename simd<T>::type;
    constexpr std::size_t W = simd<T>::width;
    V c[MR][2];
    for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t v = 0; v < 2; ++v) {
            if (accumulate)
                std::memcpy(&c[r][v], out + r * ldo + v * W, sizeof(V));
            else
                c[r][v] = V{};
        }
    for (std::size_t k = 0; k < K; ++k) {
        V bv[2];
        std::memcpy(&bv[0], b + k * ldb, sizeof(V));
        std::memcpy(&bv[1], b + k * ldb + W, sizeof(V));
        for (std::size_t r = 0; r < MR; ++r) {
            const T av = a[r * ar + k * ak];
            c[r][0] += av * bv[0];
            c[r][1] += av * bv[1];
        }
    }
    for (std::size_t r = 0; r < MR; ++r)
        for (std::size_t v = 0; v < 2; ++v) std::memcpy(out + r * ldo + v * W, &c[r][v], sizeof(V));
}

template <class T>
inline void gemm_row_tail(std::size_t K, const T* a, std::size_t ak, const T* b, std::size_t ldb, T* out,
                          std::size_t nr, bool accumulate) {
    if (!accumulate) std::fill(out, out + nr, T{0});
    for (std::size_t k = 0; k < K; ++k) {
        const T av = a[k * ak];
        const T* br = b + k * ldb;
        for (std::size_t j = 0; j < nr; ++j) out[j] += av * br[j];
    }
}

}  // namespace detail

// out[r][j] (+)= sum_k A(r, k) * b[k][j] for an M x N output, where
// A(r, k) = a[r * ar + k * ak]. The sum runs over k in ascending order.
template <class T>
void gemm(std::size_t M, std::size_t N, std::size_t K, const T* a, std::size_t ar, std::size_t ak, const T* b,
          std::size_t ldb, T* out, std::size_t ldo, bool accumulate) {
    constexpr std::size_t MR = 4, NR = 2 * detail::simd<T>::width;
    std::size_t j = 0;
    for (; j + NR <= N; j += NR) {
        std::size_t i = 0;
        for (; i + MR <= M; i += MR)
            detail::gemm_tile<MR>(K, a + i * ar, ar, ak, b + j, ldb, out + i * ldo + j, ldo, accumulate);
        for (; i < M; ++i)
            detail::gemm_tile<1>(K, a + i * ar, ar, ak, b + j, ldb, out + i * ldo + j, ldo, accumulate);
    }
    if (j < N)
        for (std::size_t i = 0; i < M; ++i)
            detail::gemm_row_tail(K, a + i * ar, ak, b + j, ldb, out + i * ldo + j, N - j, accumulate);
}

// out = a * b
template <class T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out) {
    assert(a.cols() == b.rows());
    out.resize(a.rows(), b.cols());
    gemm(a.rows(), b.cols(), a.cols(), a.data(), a.cols(), 1, b.data(), b.cols(), out.data(), b.cols(), false);
}

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> out;
    matmul(a, b, out);
    return out;
}

// out[r0:, :] = a[r0:, :] * b, rows below r0 untouched. out must be sized.
template <class T>
void matmul_rows(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, std::size_t r0) {
    assert(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols());
    if (r0 >= a.rows()) return;
    const std::size_t n = b.cols();
    gemm(a.rows() - r0, n, a.cols(), a.data() + r0 * a.cols(), a.cols(), 1, b.data(), n, out.data() + r0 * n, n, false);
}

// out += a^T * b, restricted to rows r0.. of a and b.
template <class T>
void matmul_tn_acc(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, std::size_t r0 = 0) {
    assert(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols());
    if (r0 >= a.rows()) return;
    const std::size_t n = b.cols();
    gemm(a.cols(), n, a.rows() - r0, a.data() + r0 * a.cols(), 1, a.cols(), b.data() + r0 * n, n, out.data(), n, true);
}

template <class T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

template <class T>
T max_abs_diff(const Matrix<T>& a, const Matrix<T>& b) {
    assert(a.rows() == b.rows() && a.cols() == b.cols());
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

template <class T>
bool all_finite(const Matrix<T>& a) {
    return std::all_of(a.data(), a.data() + a.size(), [](T v) { return std::isfinite(v); });
}

}  // namespace kginject
