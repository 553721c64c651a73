#pragma once

#include <vector>

#include "ginv/tensor.hpp"

namespace ginv {

// Step-decay schedule: the learning rate is multiplied by 0.1 each time the
// iteration counter crosses 3/8, 5/8 and 7/8 of the total budget.
inline double decayed_lr(double base, std::int64_t iter, std::int64_t total) {
    double lr = base;
    if (8 * iter >= 3 * total) lr *= 0.1;
    if (8 * iter >= 5 * total) lr *= 0.1;
    if (8 * iter >= 7 * total) lr *= 0.1;
    return lr;
}

class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.push_back(Tensor::zeros(p.shape));
                v_.push_back(Tensor::zeros(p.shape));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i];
            const Tensor& g = grads[i];
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
            }
        }
    }

private:
    double beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

inline void gd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::int64_t j = 0; j < params[i].numel(); ++j) params[i][j] -= lr * grads[i][j];
}

} // namespace ginv
