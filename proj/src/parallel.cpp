#include "ginv/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ginv::par {

namespace {
bool g_enabled = true;
}

void set_enabled(bool on) { g_enabled = on; }

bool enabled() {
#ifdef _OPENMP
    return g_enabled;
#else
    return false;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace ginv::par
