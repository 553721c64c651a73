#include "ginv/common.hpp"

#include <cmath>
#include <cstdio>

namespace ginv {

std::string fmt_g(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

} // namespace ginv
