#pragma once

#include <cmath>

#include "prinr/errors.hpp"
#include "prinr/nn/core.hpp"

namespace prinr::nn {

// Adam with decoupled weight decay, global-norm gradient clipping and
// post-step float32 quantization of the parameters (see quantize_f32).
class Adam {
public:
    double lr = 2e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip_norm = 0.0;  // 0 disables clipping

    explicit Adam(double lr_ = 2e-3, double weight_decay_ = 0.0, double grad_clip_norm_ = 0.0)
        : lr(lr_), weight_decay(weight_decay_), grad_clip_norm(grad_clip_norm_) {}

    double step(const ParamList& params) {
        ++t_;
        double sq = 0.0;
        for (const Tensor* p : params) sq += p->g.squaredNorm();
        const double gnorm = std::sqrt(sq);
        if (!std::isfinite(gnorm)) throw NumericError("Adam: non-finite gradient norm");
        double scale = 1.0;
        if (grad_clip_norm > 0.0 && gnorm > grad_clip_norm) scale = grad_clip_norm / gnorm;

        const double bc1 = 1.0 - std::pow(beta1, t_);
        const double bc2 = 1.0 - std::pow(beta2, t_);
        for (Tensor* p : params) {
            const Mat g = p->g * scale;
            p->m_state = beta1 * p->m_state + (1.0 - beta1) * g;
            p->v_state = beta2 * p->v_state + (1.0 - beta2) * g.cwiseProduct(g);
            const Mat mhat = p->m_state / bc1;
            const Mat vhat = p->v_state / bc2;
            p->v -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
            if (weight_decay > 0.0) p->v -= lr * weight_decay * p->v;
            quantize_f32(p->v);
        }
        return gnorm;
    }

    void zero_grad(const ParamList& params) {
        for (Tensor* p : params) p->zero_grad();
    }

    long steps_taken() const { return t_; }

private:
    long t_ = 0;
};

}  // namespace prinr::nn
