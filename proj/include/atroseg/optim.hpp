#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "atroseg/tensor.hpp"

namespace atroseg {

// Classical (heavy-ball) momentum:
//   v <- momentum * v + grad
//   p <- p - learning_rate * v
// Velocity buffers are created on first step and stay in one-to-one
// correspondence with the parameter list.
template <class T>
class SgdMomentum {
public:
    SgdMomentum(double learning_rate, double momentum) : lr_(learning_rate), momentum_(momentum) {
        if (!(learning_rate > 0.0)) throw std::invalid_argument("SgdMomentum: learning_rate must be > 0");
    }

    void set_learning_rate(double lr) {
        if (!(lr > 0.0)) throw std::invalid_argument("SgdMomentum: learning_rate must be > 0");
        lr_ = lr;
    }
    double learning_rate() const { return lr_; }
    double momentum() const { return momentum_; }

    void step(const std::vector<TensorPtr<T>>& params) {
        if (velocity_.empty()) {
            velocity_.reserve(params.size());
            owners_.reserve(params.size());
            for (const auto& p : params) {
                velocity_.emplace_back(static_cast<std::size_t>(p->numel()), T(0));
                owners_.push_back(p.get());
            }
        }
        if (params.size() != owners_.size())
            throw std::invalid_argument("SgdMomentum: parameter list size changed");
        const T mom = static_cast<T>(momentum_);
        const T lr = static_cast<T>(lr_);
        for (std::size_t k = 0; k < params.size(); ++k) {
            const auto& p = params[k];
            if (p.get() != owners_[k])
                throw std::invalid_argument("SgdMomentum: parameter list does not match optimizer state");
            if (p->grad.size() != p->data.size())
                throw std::invalid_argument("SgdMomentum: gradient missing or shape mismatch for parameter " +
                                            std::to_string(k));
            std::vector<T>& v = velocity_[k];
            for (std::size_t i = 0; i < v.size(); ++i) {
                v[i] = mom * v[i] + p->grad[i];
                p->data[i] -= lr * v[i];
            }
        }
    }

private:
    double lr_, momentum_;
    std::vector<std::vector<T>> velocity_;
    std::vector<const Tensor<T>*> owners_;
};

}  // namespace atroseg
