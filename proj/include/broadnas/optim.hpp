// SPDX-License-Identifier: Apache-2.0
//
// Learning-rate schedule and first-order optimizers.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace broadnas {

/// Cosine annealing with warm restarts. Period i has length
/// T_0 * T_mul^i epochs and decays from l_max to l_min.
struct LrSchedule {
    double l_max = 0.05;
    double l_min = 0.0005;
    double t_0 = 10.0;
    double t_mul = 2.0;
};

/// l_min + (l_max - l_min) * (1 + cos(pi * t_cur / period)) / 2
double warm_restart_lr(double l_max, double l_min, double t_cur, double period);

/// Learning rate at a (fractional) epoch >= 0.
double cosine_lr(const LrSchedule& sched, double epoch);

/// Throws NumericError naming the first non-finite entry.
void check_finite(std::span<const double> values, const char* what);

/// Nesterov momentum in the common deep-learning form:
///   buf = momentum * buf + g;  p -= lr * (g + momentum * buf)
void sgd_nesterov_step(std::span<double> param, std::span<const double> grad, std::span<double> momentum_buf,
                       double lr, double momentum);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

struct AdamConfig {
    double lr = 0.0035;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam update. `state` is sized on first use.
void adam_step(std::span<double> param, std::span<const double> grad, AdamState& state, const AdamConfig& cfg);

}  // namespace broadnas
