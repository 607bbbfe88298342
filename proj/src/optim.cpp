// SPDX-License-Identifier: Apache-2.0

#include "broadnas/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "broadnas/tensor.hpp"

namespace broadnas {

double warm_restart_lr(double l_max, double l_min, double t_cur, double period) {
    return l_min + 0.5 * (l_max - l_min) * (1.0 + std::cos(std::numbers::pi * t_cur / period));
}

double cosine_lr(const LrSchedule& sched, double epoch) {
    if (epoch < 0.0) epoch = 0.0;
    double period = sched.t_0;
    double t_cur = epoch;
    if (sched.t_mul == 1.0) {
        t_cur = std::fmod(epoch, period);
    } else {
        while (t_cur >= period) {
            t_cur -= period;
            period *= sched.t_mul;
        }
    }
    return warm_restart_lr(sched.l_max, sched.l_min, t_cur, period);
}

void check_finite(std::span<const double> values, const char* what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw NumericError(std::string("non-finite value in ") + what + " at index " + std::to_string(i));
        }
    }
}

void sgd_nesterov_step(std::span<double> param, std::span<const double> grad, std::span<double> momentum_buf,
                       double lr, double momentum) {
    if (param.size() != grad.size() || param.size() != momentum_buf.size()) {
        throw ShapeError("sgd_nesterov_step", "param/grad/momentum sizes differ");
    }
    check_finite(grad, "gradient");
    for (std::size_t i = 0; i < param.size(); ++i) {
        momentum_buf[i] = momentum * momentum_buf[i] + grad[i];
        param[i] -= lr * (grad[i] + momentum * momentum_buf[i]);
    }
}

void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state, const AdamConfig& cfg) {
    if (param.size() != grad.size()) throw ShapeError("adam_step", "param/grad sizes differ");
    check_finite(grad, "gradient");
    if (state.m.empty()) {
        state.m.assign(param.size(), 0.0);
        state.v.assign(param.size(), 0.0);
    }
    if (state.m.size() != param.size()) throw ShapeError("adam_step", "optimizer state size differs from param");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        param[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
}

}  // namespace broadnas
