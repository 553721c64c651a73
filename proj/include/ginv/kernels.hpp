#pragma once

#include <cstdint>

namespace ginv::kern {

using i64 = std::int64_t;

// Serial reference kernels. These define the arithmetic: the OpenMP variants
// must produce bit-identical output (each output element is computed by a
// single thread with the same operation order, and reductions use the same
// fixed block decomposition).
namespace serial {
void add(const double* a, const double* b, double* y, i64 n);
void sub(const double* a, const double* b, double* y, i64 n);
void mul(const double* a, const double* b, double* y, i64 n);
void scale(const double* a, double c, double* y, i64 n);
void sigmoid(const double* a, double* y, i64 n);
void elu(const double* a, double* y, i64 n);
void exp(const double* a, double* y, i64 n);
void log(const double* a, double* y, i64 n);
void heaviside(const double* a, double* y, i64 n);
void recip_or_zero(const double* a, double* y, i64 n);
void sqrt(const double* a, double* y, i64 n);
void matmul(const double* a, const double* b, double* y, i64 n, i64 k, i64 m);
void transpose(const double* a, double* y, i64 rows, i64 cols);
void gather(const double* src, const i64* pat, double* y, i64 n);
void scatter_sum(const double* src, const i64* inv_off, const i64* inv_idx, double* y, i64 out_n);
double reduce_sum(const double* a, i64 n);
double reduce_max(const double* a, i64 n);
} // namespace serial

// Dispatching kernels: run the OpenMP path when ginv::par::enabled() and the
// problem is large enough, the serial reference otherwise.
void add(const double* a, const double* b, double* y, i64 n);
void sub(const double* a, const double* b, double* y, i64 n);
void mul(const double* a, const double* b, double* y, i64 n);
void scale(const double* a, double c, double* y, i64 n);
void sigmoid(const double* a, double* y, i64 n);
void elu(const double* a, double* y, i64 n);
void exp(const double* a, double* y, i64 n);
void log(const double* a, double* y, i64 n);
void heaviside(const double* a, double* y, i64 n);
void recip_or_zero(const double* a, double* y, i64 n);
void sqrt(const double* a, double* y, i64 n);
void matmul(const double* a, const double* b, double* y, i64 n, i64 k, i64 m);
void transpose(const double* a, double* y, i64 rows, i64 cols);
void gather(const double* src, const i64* pat, double* y, i64 n);
void scatter_sum(const double* src, const i64* inv_off, const i64* inv_idx, double* y, i64 out_n);
double reduce_sum(const double* a, i64 n);
double reduce_max(const double* a, i64 n);

} // namespace ginv::kern
