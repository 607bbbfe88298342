// SPDX-License-Identifier: Apache-2.0
//
// LSTM policy over genotype token sequences, trained with REINFORCE.
//
// One LSTM emits the whole sequence. Step t reads the embedding of token
// t-1 (a learned start vector at t = 0) and scores the legal range of
// position t with a position-class head: one head per node for input tokens
// (sized by the node index) and one shared head for op tokens. Heads have no
// bias, so all-zero parameters give uniform choices.

#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "broadnas/autodiff.hpp"
#include "broadnas/cell_space.hpp"
#include "broadnas/optim.hpp"

namespace broadnas {

struct ControllerConfig {
    int hidden = 64;
    double temperature = 1.0;
    double entropy_weight = 1e-4;
    double baseline_decay = 0.99;
    double init_range = 0.1;  // parameters start uniform in [-r, r]
    AdamConfig adam{};
    Grammar grammar{};
};

struct Episode {
    TokenSequence tokens;
    std::vector<double> log_probs;
    std::vector<double> entropies;
    double reward = -1.0;

    double total_log_prob() const;
};

/// Recurrent state between steps; exposed for enumeration.
struct RolloutState {
    Tensor h;
    Tensor c;
    int position = 0;
    int prev_token = -1;
};

class Controller {
public:
    explicit Controller(ControllerConfig cfg = {}, std::uint64_t seed = 0);

    const ControllerConfig& config() const noexcept { return cfg_; }
    void set_temperature(double t);

    Episode sample(std::mt19937_64& rng) const;
    /// Argmax decoding.
    Episode greedy() const;
    /// Sum of log-probabilities the sampler assigns to `tokens`. Throws Error
    /// for an illegal sequence.
    double log_prob(std::span<const int> tokens) const;

    RolloutState begin() const;
    /// Log-probabilities over the legal range of state.position.
    std::vector<double> next_log_probs(const RolloutState& state) const;
    RolloutState advance(const RolloutState& state, int token) const;

    /// Loss whose gradient is the REINFORCE estimate:
    ///   -mean_e[(R_e - baseline) * sum_t log p_e,t] - w * mean_e[sum_t H_e,t]
    /// Recorded on the active tape.
    Tensor policy_objective(std::span<const Episode> episodes, double baseline) const;

    /// One Adam step on the objective above, then the baseline moves
    /// towards the mean reward. Throws Error for rewards outside [0, 1].
    void reinforce_update(std::span<const Episode> episodes);

    double baseline() const noexcept { return baseline_; }
    bool baseline_initialized() const noexcept { return baseline_init_; }
    void set_baseline(double b) {
        baseline_ = b;
        baseline_init_ = true;
    }

    std::map<std::string, Tensor>& parameters() noexcept { return params_; }
    const std::map<std::string, Tensor>& parameters() const noexcept { return params_; }
    void set_zero();

    std::uint64_t digest() const;
    std::string serialize() const;
    static Controller deserialize(std::string_view bytes);

private:
    struct Trace {
        TokenSequence tokens;
        std::vector<Tensor> log_probs;
        std::vector<Tensor> entropies;
    };
    enum class Mode { Sample, Greedy, Forced };
    Trace run(Mode mode, std::span<const int> forced, std::mt19937_64* rng, bool entropies) const;
    Tensor step_logits(RolloutState& state) const;
    void init_params(std::uint64_t seed);

    ControllerConfig cfg_;
    std::map<std::string, Tensor> params_;
    std::map<std::string, AdamState> adam_;
    double baseline_ = 0.0;
    bool baseline_init_ = false;
};

/// Sum over positions of log(1 / legal range): the log-probability of every
/// sequence under a uniform policy.
double uniform_sequence_log_prob(const Grammar& grammar);

}  // namespace broadnas
