#include "ginv/kernels.hpp"

#include <cmath>
#include <vector>

#include "ginv/parallel.hpp"

namespace ginv::kern {

namespace {
constexpr i64 kBlock = 4096; // reduction block size, fixed so serial/parallel sums agree bitwise
}

namespace serial {

void add(const double* a, const double* b, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void sub(const double* a, const double* b, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] - b[i];
}
void mul(const double* a, const double* b, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
void scale(const double* a, double c, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] * c;
}
void sigmoid(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-a[i]));
}
void elu(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] > 0.0 ? a[i] : std::expm1(a[i]);
}
void exp(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = std::exp(a[i]);
}
void log(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = std::log(a[i]);
}
void heaviside(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] > 0.0 ? 1.0 : 0.0;
}
void recip_or_zero(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = a[i] > 0.0 ? 1.0 / a[i] : 0.0;
}
void sqrt(const double* a, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = std::sqrt(a[i]);
}
void matmul(const double* a, const double* b, double* y, i64 n, i64 k, i64 m) {
    for (i64 i = 0; i < n; ++i) {
        for (i64 j = 0; j < m; ++j) {
            double acc = 0.0;
            for (i64 t = 0; t < k; ++t) acc += a[i * k + t] * b[t * m + j];
            y[i * m + j] = acc;
        }
    }
}
void transpose(const double* a, double* y, i64 rows, i64 cols) {
    for (i64 i = 0; i < rows; ++i)
        for (i64 j = 0; j < cols; ++j) y[j * rows + i] = a[i * cols + j];
}
void gather(const double* src, const i64* pat, double* y, i64 n) {
    for (i64 i = 0; i < n; ++i) y[i] = pat[i] < 0 ? 0.0 : src[pat[i]];
}
void scatter_sum(const double* src, const i64* inv_off, const i64* inv_idx, double* y, i64 out_n) {
    for (i64 o = 0; o < out_n; ++o) {
        double acc = 0.0;
        for (i64 p = inv_off[o]; p < inv_off[o + 1]; ++p) acc += src[inv_idx[p]];
        y[o] = acc;
    }
}
double reduce_sum(const double* a, i64 n) {
    const i64 nblocks = (n + kBlock - 1) / kBlock;
    double total = 0.0;
    for (i64 b = 0; b < nblocks; ++b) {
        const i64 lo = b * kBlock;
        const i64 hi = lo + kBlock < n ? lo + kBlock : n;
        double acc = 0.0;
        for (i64 i = lo; i < hi; ++i) acc += a[i];
        total += acc;
    }
    return total;
}
double reduce_max(const double* a, i64 n) {
    double m = a[0];
    for (i64 i = 1; i < n; ++i)
        if (a[i] > m) m = a[i];
    return m;
}

} // namespace serial

namespace {
inline bool go_parallel(i64 n) { return par::enabled() && n >= par::kGrain; }
}

#define GINV_EW2(NAME, EXPR)                                        \
    void NAME(const double* a, const double* b, double* y, i64 n) { \
        if (go_parallel(n)) {                                       \
            _Pragma("omp parallel for schedule(static)")            \
            for (i64 i = 0; i < n; ++i) y[i] = (EXPR);              \
        } else {                                                    \
            serial::NAME(a, b, y, n);                               \
        }                                                           \
    }

#define GINV_EW1(NAME, EXPR)                                \
    void NAME(const double* a, double* y, i64 n) {          \
        if (go_parallel(n)) {                               \
            _Pragma("omp parallel for schedule(static)")    \
            for (i64 i = 0; i < n; ++i) y[i] = (EXPR);      \
        } else {                                            \
            serial::NAME(a, y, n);                          \
        }                                                   \
    }

GINV_EW2(add, a[i] + b[i])
GINV_EW2(sub, a[i] - b[i])
GINV_EW2(mul, a[i] * b[i])
GINV_EW1(sigmoid, 1.0 / (1.0 + std::exp(-a[i])))
GINV_EW1(elu, a[i] > 0.0 ? a[i] : std::expm1(a[i]))
GINV_EW1(exp, std::exp(a[i]))
GINV_EW1(log, std::log(a[i]))
GINV_EW1(heaviside, a[i] > 0.0 ? 1.0 : 0.0)
GINV_EW1(recip_or_zero, a[i] > 0.0 ? 1.0 / a[i] : 0.0)
GINV_EW1(sqrt, std::sqrt(a[i]))

#undef GINV_EW1
#undef GINV_EW2

void scale(const double* a, double c, double* y, i64 n) {
    if (go_parallel(n)) {
#pragma omp parallel for schedule(static)
        for (i64 i = 0; i < n; ++i) y[i] = a[i] * c;
    } else {
        serial::scale(a, c, y, n);
    }
}

void matmul(const double* a, const double* b, double* y, i64 n, i64 k, i64 m) {
    if (par::enabled() && n * m >= par::kGrain && n > 1) {
#pragma omp parallel for schedule(static)
        for (i64 i = 0; i < n; ++i) {
            for (i64 j = 0; j < m; ++j) {
                double acc = 0.0;
                for (i64 t = 0; t < k; ++t) acc += a[i * k + t] * b[t * m + j];
                y[i * m + j] = acc;
            }
        }
    } else {
        serial::matmul(a, b, y, n, k, m);
    }
}

void transpose(const double* a, double* y, i64 rows, i64 cols) {
    if (go_parallel(rows * cols)) {
#pragma omp parallel for schedule(static)
        for (i64 i = 0; i < rows; ++i)
            for (i64 j = 0; j < cols; ++j) y[j * rows + i] = a[i * cols + j];
    } else {
        serial::transpose(a, y, rows, cols);
    }
}

void gather(const double* src, const i64* pat, double* y, i64 n) {
    if (go_parallel(n)) {
#pragma omp parallel for schedule(static)
        for (i64 i = 0; i < n; ++i) y[i] = pat[i] < 0 ? 0.0 : src[pat[i]];
    } else {
        serial::gather(src, pat, y, n);
    }
}

void scatter_sum(const double* src, const i64* inv_off, const i64* inv_idx, double* y, i64 out_n) {
    if (go_parallel(out_n)) {
#pragma omp parallel for schedule(static)
        for (i64 o = 0; o < out_n; ++o) {
            double acc = 0.0;
            for (i64 p = inv_off[o]; p < inv_off[o + 1]; ++p) acc += src[inv_idx[p]];
            y[o] = acc;
        }
    } else {
        serial::scatter_sum(src, inv_off, inv_idx, y, out_n);
    }
}

double reduce_sum(const double* a, i64 n) {
    if (go_parallel(n)) {
        const i64 nblocks = (n + kBlock - 1) / kBlock;
        std::vector<double> partial(static_cast<std::size_t>(nblocks));
#pragma omp parallel for schedule(static)
        for (i64 b = 0; b < nblocks; ++b) {
            const i64 lo = b * kBlock;
            const i64 hi = lo + kBlock < n ? lo + kBlock : n;
            double acc = 0.0;
            for (i64 i = lo; i < hi; ++i) acc += a[i];
            partial[static_cast<std::size_t>(b)] = acc;
        }
        double total = 0.0;
        for (double p : partial) total += p;
        return total;
    }
    return serial::reduce_sum(a, n);
}

double reduce_max(const double* a, i64 n) {
    return serial::reduce_max(a, n); // exact and cheap; max is order-independent
}

} // namespace ginv::kern
