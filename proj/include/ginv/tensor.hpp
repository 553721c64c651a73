#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ginv/common.hpp"

namespace ginv {

// Dense row-major tensor of 64-bit reals. Rank 0 is a scalar (one entry).
using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        check(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
              "tensor: shape ", shape_str(shape), " does not match data length ", data.size());
        for (auto d_ : shape) check(d_ > 0, "tensor: non-positive dimension in ", shape_str(shape));
    }

    static Tensor zeros(Shape s) {
        auto n = shape_numel(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
    }
    static Tensor full(Shape s, double v) {
        auto n = shape_numel(s);
        return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
    }
    static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

    double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    double scalar_value() const {
        check(numel() == 1, "tensor: scalar_value on shape ", shape_str(shape));
        return data[0];
    }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Entry point for values arriving from files or other external sources.
    void validate_external(const std::string& where) const {
        check(all_finite(), where, ": non-finite entry rejected");
    }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

} // namespace ginv
