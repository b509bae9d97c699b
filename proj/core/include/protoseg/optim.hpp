#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "protoseg/array.hpp"

namespace protoseg {

/// Classic momentum SGD with L2 added to the gradient:
///   v <- momentum*v + (g + wd*p);  p <- p - lr*v
template <typename T>
struct SgdState {
    std::vector<DenseArray<T>> velocity;

    static SgdState zeros_like(const std::vector<DenseArray<T>*>& params) {
        SgdState s;
        for (const auto* p : params) s.velocity.emplace_back(p->shape);
        return s;
    }
};

template <typename T>
void sgd_step(const std::vector<DenseArray<T>*>& params,
              const std::vector<const DenseArray<T>*>& grads, SgdState<T>& state, T lr, T momentum,
              T weight_decay) {
    if (params.size() != grads.size() || params.size() != state.velocity.size())
        throw ShapeError("sgd_step: parameter/gradient/state count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        DenseArray<T>& p = *params[i];
        const DenseArray<T>& g = *grads[i];
        DenseArray<T>& v = state.velocity[i];
        if (!p.same_shape(g) || !p.same_shape(v)) throw ShapeError("sgd_step: shape mismatch");
        for (std::size_t j = 0; j < p.numel(); ++j) {
            v.data[j] = momentum * v.data[j] + (g.data[j] + weight_decay * p.data[j]);
            p.data[j] -= lr * v.data[j];
        }
    }
}

/// Adam with bias-corrected moments (beta1=0.9, beta2=0.999, eps=1e-8).
template <typename T>
struct AdamState {
    std::vector<DenseArray<T>> m, v;
    long step = 0;
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);

    static AdamState zeros_like(const std::vector<DenseArray<T>*>& params) {
        AdamState s;
        for (const auto* p : params) {
            s.m.emplace_back(p->shape);
            s.v.emplace_back(p->shape);
        }
        return s;
    }
};

template <typename T>
void adam_step(const std::vector<DenseArray<T>*>& params,
               const std::vector<const DenseArray<T>*>& grads, AdamState<T>& state, T lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw ShapeError("adam_step: parameter/gradient/state count mismatch");
    ++state.step;
    const T bc1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        DenseArray<T>& p = *params[i];
        const DenseArray<T>& g = *grads[i];
        for (std::size_t j = 0; j < p.numel(); ++j) {
            state.m[i].data[j] = state.beta1 * state.m[i].data[j] + (T(1) - state.beta1) * g.data[j];
            state.v[i].data[j] =
                state.beta2 * state.v[i].data[j] + (T(1) - state.beta2) * g.data[j] * g.data[j];
            const T mhat = state.m[i].data[j] / bc1;
            const T vhat = state.v[i].data[j] / bc2;
            p.data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

}  // namespace protoseg
