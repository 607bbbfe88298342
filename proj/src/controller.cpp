// SPDX-License-Identifier: Apache-2.0

#include "broadnas/controller.hpp"

#include <cmath>

#include "broadnas/bytes.hpp"

namespace broadnas {

double Episode::total_log_prob() const {
    double s = 0.0;
    for (double v : log_probs) s += v;
    return s;
}

double uniform_sequence_log_prob(const Grammar& grammar) {
    double s = 0.0;
    for (int t = 0; t < grammar.sequence_length(); ++t) s -= std::log(static_cast<double>(grammar.token_range(t)));
    return s;
}

Controller::Controller(ControllerConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.hidden < 1) throw Error("controller: hidden size must be positive");
    if (!(cfg_.temperature > 0.0)) throw Error("controller: temperature must be positive");
    if (cfg_.grammar.computed_nodes < 1 || cfg_.grammar.num_ops < 1 || cfg_.grammar.num_ops > kNumOpKinds) {
        throw Error("controller: unsupported grammar");
    }
    init_params(seed);
}

void Controller::init_params(std::uint64_t seed) {
    const auto h = static_cast<std::size_t>(cfg_.hidden);
    const auto& g = cfg_.grammar;
    std::map<std::string, Shape> shapes{
        {"lstm/w", {4 * h, 2 * h}},
        {"lstm/b", {4 * h}},
        {"start", {1, h}},
        {"emb/input", {static_cast<std::size_t>(g.computed_nodes + 1), h}},
        {"emb/op", {static_cast<std::size_t>(g.num_ops), h}},
        {"head/op", {static_cast<std::size_t>(g.num_ops), h}},
    };
    for (int n = 2; n < 2 + g.computed_nodes; ++n) {
        shapes["head/n" + std::to_string(n)] = {static_cast<std::size_t>(n), h};
    }
    params_.clear();
    adam_.clear();
    for (const auto& [name, shape] : shapes) {
        Tensor t(shape);
        std::mt19937_64 rng(substream_seed(seed, "controller/" + name));
        std::uniform_real_distribution<double> dist(-cfg_.init_range, cfg_.init_range);
        for (double& v : t.data_mut()) v = dist(rng);
        t.set_requires_grad(true);
        params_.emplace(name, t);
    }
}

void Controller::set_zero() {
    for (auto& [name, t] : params_) {
        for (double& v : t.data_mut()) v = 0.0;
    }
}

void Controller::set_temperature(double t) {
    if (!(t > 0.0)) throw Error("controller: temperature must be positive");
    cfg_.temperature = t;
}

RolloutState Controller::begin() const {
    const auto h = static_cast<std::size_t>(cfg_.hidden);
    RolloutState s;
    s.h = Tensor(Shape{1, h});
    s.c = Tensor(Shape{1, h});
    return s;
}

Tensor Controller::step_logits(RolloutState& state) const {
    const auto& g = cfg_.grammar;
    if (state.position >= g.sequence_length()) throw Error("controller: rollout past the end of the sequence");
    const auto h = static_cast<std::size_t>(cfg_.hidden);
    Tensor x;
    if (state.position == 0) {
        x = params_.at("start");
    } else if (g.is_op_position(state.position - 1)) {
        x = embedding(params_.at("emb/op"), static_cast<std::size_t>(state.prev_token));
    } else {
        x = embedding(params_.at("emb/input"), static_cast<std::size_t>(state.prev_token));
    }
    const std::array<Tensor, 2> xh{x, state.h};
    const Tensor z = affine(concat(xh), params_.at("lstm/w"), params_.at("lstm/b"));
    const Tensor i = sigmoid(slice_cols(z, 0, h));
    const Tensor f = sigmoid(slice_cols(z, h, h));
    const Tensor u = tanh(slice_cols(z, 2 * h, h));
    const Tensor o = sigmoid(slice_cols(z, 3 * h, h));
    state.c = add(mul(f, state.c), mul(i, u));
    state.h = mul(o, tanh(state.c));
    const std::string head =
        g.is_op_position(state.position) ? "head/op" : "head/n" + std::to_string(g.node_of(state.position));
    Tensor logits = affine(state.h, params_.at(head));
    if (cfg_.temperature != 1.0) logits = scale(logits, 1.0 / cfg_.temperature);
    return logits;
}

std::vector<double> Controller::next_log_probs(const RolloutState& state) const {
    RolloutState s = state;
    const Tensor lsm = log_softmax(step_logits(s));
    return {lsm.data().begin(), lsm.data().end()};
}

RolloutState Controller::advance(const RolloutState& state, int token) const {
    RolloutState s = state;
    step_logits(s);
    const int range = cfg_.grammar.token_range(s.position);
    if (token < 0 || token >= range) {
        throw Error("controller: token " + std::to_string(token) + " at position " + std::to_string(s.position) +
                    " outside [0, " + std::to_string(range - 1) + "]");
    }
    s.prev_token = token;
    s.position += 1;
    return s;
}

Controller::Trace Controller::run(Mode mode, std::span<const int> forced, std::mt19937_64* rng,
                                  bool entropies) const {
    const auto& g = cfg_.grammar;
    if (mode == Mode::Forced && static_cast<int>(forced.size()) != g.sequence_length()) {
        throw Error("controller: sequence has length " + std::to_string(forced.size()) + ", expected " +
                    std::to_string(g.sequence_length()));
    }
    Trace tr;
    RolloutState state = begin();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int t = 0; t < g.sequence_length(); ++t) {
        const Tensor lsm = log_softmax(step_logits(state));
        const auto lp = lsm.data();
        const int range = static_cast<int>(lp.size());
        int token = 0;
        if (mode == Mode::Forced) {
            token = forced[static_cast<std::size_t>(t)];
            if (token < 0 || token >= range) {
                throw Error("controller: token " + std::to_string(token) + " at position " + std::to_string(t) +
                            " outside [0, " + std::to_string(range - 1) + "]");
            }
        } else if (mode == Mode::Greedy) {
            for (int a = 1; a < range; ++a) {
                if (lp[static_cast<std::size_t>(a)] > lp[static_cast<std::size_t>(token)]) token = a;
            }
        } else {
            const double r = unit(*rng);
            double acc = 0.0;
            token = range - 1;
            for (int a = 0; a < range; ++a) {
                acc += std::exp(lp[static_cast<std::size_t>(a)]);
                if (r < acc) {
                    token = a;
                    break;
                }
            }
        }
        const std::size_t idx[1] = {static_cast<std::size_t>(token)};
        tr.log_probs.push_back(pick(lsm, idx));
        if (entropies) tr.entropies.push_back(scale(sum(mul(exp(lsm), lsm)), -1.0));
        tr.tokens.push_back(token);
        state.prev_token = token;
        state.position += 1;
    }
    return tr;
}

namespace {

Episode to_episode(const std::vector<int>& tokens, const std::vector<Tensor>& lps, const std::vector<Tensor>& ents) {
    Episode e;
    e.tokens = tokens;
    for (const auto& t : lps) e.log_probs.push_back(t.item());
    for (const auto& t : ents) e.entropies.push_back(t.item());
    return e;
}

}  // namespace

Episode Controller::sample(std::mt19937_64& rng) const {
    const Trace tr = run(Mode::Sample, {}, &rng, true);
    return to_episode(tr.tokens, tr.log_probs, tr.entropies);
}

Episode Controller::greedy() const {
    const Trace tr = run(Mode::Greedy, {}, nullptr, true);
    return to_episode(tr.tokens, tr.log_probs, tr.entropies);
}

double Controller::log_prob(std::span<const int> tokens) const {
    const Trace tr = run(Mode::Forced, tokens, nullptr, false);
    double s = 0.0;
    for (const auto& t : tr.log_probs) s += t.item();
    return s;
}

Tensor Controller::policy_objective(std::span<const Episode> episodes, double baseline) const {
    if (episodes.empty()) throw Error("controller: no episodes");
    const double inv = 1.0 / static_cast<double>(episodes.size());
    const bool with_entropy = cfg_.entropy_weight != 0.0;
    Tensor loss;
    for (const auto& ep : episodes) {
        const Trace tr = run(Mode::Forced, ep.tokens, nullptr, with_entropy);
        Tensor total = tr.log_probs[0];
        for (std::size_t t = 1; t < tr.log_probs.size(); ++t) total = add(total, tr.log_probs[t]);
        Tensor term = scale(sum(total), -(ep.reward - baseline) * inv);
        if (with_entropy) {
            Tensor ent = tr.entropies[0];
            for (std::size_t t = 1; t < tr.entropies.size(); ++t) ent = add(ent, tr.entropies[t]);
            term = add(term, scale(ent, -cfg_.entropy_weight * inv));
        }
        loss = loss.defined() ? add(loss, term) : term;
    }
    return loss;
}

void Controller::reinforce_update(std::span<const Episode> episodes) {
    if (episodes.empty()) throw Error("controller: no episodes");
    double mean = 0.0;
    for (const auto& ep : episodes) {
        if (!(ep.reward >= 0.0 && ep.reward <= 1.0)) {
            throw Error("controller: reward " + std::to_string(ep.reward) + " outside [0, 1]");
        }
        mean += ep.reward;
    }
    mean /= static_cast<double>(episodes.size());
    if (!baseline_init_) {
        baseline_ = mean;
        baseline_init_ = true;
    }
    Tape tape;
    {
        TapeScope scope(tape);
        for (auto& [name, p] : params_) p.zero_grad();
        const Tensor loss = policy_objective(episodes, baseline_);
        backward(tape, loss);
    }
    for (auto& [name, p] : params_) check_finite(p.grad(), "controller gradient");
    for (auto& [name, p] : params_) adam_step(p.data_mut(), p.grad(), adam_[name], cfg_.adam);
    baseline_ = cfg_.baseline_decay * baseline_ + (1.0 - cfg_.baseline_decay) * mean;
}

std::string Controller::serialize() const {
    ByteWriter w;
    w.put<std::uint32_t>(1);
    w.put<std::int32_t>(cfg_.hidden);
    w.put(cfg_.temperature);
    w.put(cfg_.entropy_weight);
    w.put(cfg_.baseline_decay);
    w.put(cfg_.init_range);
    w.put(cfg_.adam.lr);
    w.put(cfg_.adam.beta1);
    w.put(cfg_.adam.beta2);
    w.put(cfg_.adam.eps);
    w.put<std::int32_t>(cfg_.grammar.computed_nodes);
    w.put<std::int32_t>(cfg_.grammar.num_ops);
    w.put<std::int32_t>(cfg_.grammar.num_cells);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(params_.size()));
    for (const auto& [name, p] : params_) {
        w.put_string(name);
        w.put_doubles(p.data());
        auto it = adam_.find(name);
        const bool has = it != adam_.end() && !it->second.m.empty();
        w.put<std::uint8_t>(has ? 1 : 0);
        if (has) {
            w.put_doubles(it->second.m);
            w.put_doubles(it->second.v);
            w.put<std::int64_t>(it->second.step);
        }
    }
    w.put(baseline_);
    w.put<std::uint8_t>(baseline_init_ ? 1 : 0);
    return w.take();
}

Controller Controller::deserialize(std::string_view bytes) {
    ByteReader r(bytes, "controller state");
    if (r.get<std::uint32_t>() != 1) throw CheckpointError("controller state: unsupported version");
    ControllerConfig cfg;
    cfg.hidden = r.get<std::int32_t>();
    cfg.temperature = r.get<double>();
    cfg.entropy_weight = r.get<double>();
    cfg.baseline_decay = r.get<double>();
    cfg.init_range = r.get<double>();
    cfg.adam.lr = r.get<double>();
    cfg.adam.beta1 = r.get<double>();
    cfg.adam.beta2 = r.get<double>();
    cfg.adam.eps = r.get<double>();
    cfg.grammar.computed_nodes = r.get<std::int32_t>();
    cfg.grammar.num_ops = r.get<std::int32_t>();
    cfg.grammar.num_cells = r.get<std::int32_t>();
    Controller c(cfg, 0);
    const auto count = r.get<std::uint32_t>();
    if (count != c.params_.size()) throw CheckpointError("controller state: parameter count mismatch");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.get_string();
        auto it = c.params_.find(name);
        if (it == c.params_.end()) throw CheckpointError("controller state: unknown parameter '" + name + "'");
        r.get_doubles(it->second.data_mut());
        if (r.get<std::uint8_t>() != 0) {
            AdamState st;
            st.m.resize(it->second.numel());
            st.v.resize(it->second.numel());
            r.get_doubles(st.m);
            r.get_doubles(st.v);
            st.step = r.get<std::int64_t>();
            c.adam_[name] = std::move(st);
        }
    }
    c.baseline_ = r.get<double>();
    c.baseline_init_ = r.get<std::uint8_t>() != 0;
    if (r.remaining() != 0) throw CheckpointError("controller state: trailing bytes");
    return c;
}

std::uint64_t Controller::digest() const { return fnv1a(serialize()); }

}  // namespace broadnas
