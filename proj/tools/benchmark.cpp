// Times the OpenMP kernels against the serial reference implementations.
#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include "ginv/kernels.hpp"
#include "ginv/parallel.hpp"
#include "ginv/rng.hpp"

using namespace ginv;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
    fn(); // warm up
    auto t0 = Clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = Clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-28s serial %9.3f ms   openmp %9.3f ms   speedup %5.2fx\n",
                name, serial_ms, parallel_ms, serial_ms / parallel_ms);
}

} // namespace

int main() {
    Rng rng(1);
    std::printf("threads: %d\n", par::max_threads());

    for (std::int64_t n : {64, 256, 512}) {
        Tensor a = rng.uniform_tensor({n, n}, -1.0, 1.0);
        Tensor b = rng.uniform_tensor({n, n}, -1.0, 1.0);
        std::vector<double> y(static_cast<std::size_t>(n * n));
        const int reps = n <= 256 ? 20 : 5;
        double s = time_ms(reps, [&] { kern::serial::matmul(a.data.data(), b.data.data(), y.data(), n, n, n); });
        par::set_enabled(true);
        double p = time_ms(reps, [&] { kern::matmul(a.data.data(), b.data.data(), y.data(), n, n, n); });
        char label[64];
        std::snprintf(label, sizeof label, "matmul %lldx%lld", static_cast<long long>(n), static_cast<long long>(n));
        report(label, s, p);
    }

    {
        const std::int64_t n = 1 << 22;
        Tensor a = rng.uniform_tensor({n}, -1.0, 1.0);
        std::vector<double> y(static_cast<std::size_t>(n));
        double s = time_ms(10, [&] { kern::serial::elu(a.data.data(), y.data(), n); });
        par::set_enabled(true);
        double p = time_ms(10, [&] { kern::elu(a.data.data(), y.data(), n); });
        report("elu 4M", s, p);

        double rs = 0, rp = 0;
        double ts = time_ms(10, [&] { rs = kern::serial::reduce_sum(a.data.data(), n); });
        double tp = time_ms(10, [&] { rp = kern::reduce_sum(a.data.data(), n); });
        report("reduce_sum 4M", ts, tp);
        if (rs != rp) {
            std::printf("ERROR: serial and parallel reductions disagree\n");
            return 1;
        }
    }
    return 0;
}
