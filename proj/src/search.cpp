// SPDX-License-Identifier: Apache-2.0

#include "broadnas/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "broadnas/bytes.hpp"
#include "json.hpp"

namespace broadnas {

namespace {

using json = nlohmann::json;

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

int count_correct(const Tensor& logits, std::span<const int> labels) {
    const std::size_t n = logits.dim(0);
    const std::size_t k = logits.dim(1);
    const auto d = logits.data();
    int correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j) {
            if (d[i * k + j] > d[i * k + best]) best = j;
        }
        if (static_cast<int>(best) == labels[i]) ++correct;
    }
    return correct;
}

std::vector<std::size_t> slice(const std::vector<std::size_t>& order, std::size_t begin, std::size_t count) {
    const std::size_t end = std::min(order.size(), begin + count);
    return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::uint64_t stream(std::uint64_t seed, const char* name, std::uint64_t a, std::uint64_t b = 0) {
    return substream_seed(substream_seed(seed, name, a), "sub", b);
}

}  // namespace

std::string tokens_to_string(const TokenSequence& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += std::to_string(tokens[i]);
    }
    return out;
}

TokenSequence tokens_from_string(const std::string& text) {
    std::istringstream is(text);
    TokenSequence out;
    int v = 0;
    while (is >> v) out.push_back(v);
    if (!is.eof()) throw Error("malformed token list '" + text + "'");
    return out;
}

std::vector<std::size_t> reward_batch_indices(std::size_t val_size, int batch_size, std::uint64_t seed, int epoch,
                                              int update, int episode) {
    const auto perm = epoch_order(val_size, stream(seed, "reward-batch", static_cast<std::uint64_t>(epoch),
                                                   static_cast<std::uint64_t>(update)),
                                  static_cast<std::uint64_t>(episode));
    return slice(perm, 0, static_cast<std::size_t>(batch_size));
}

double evaluate_accuracy(const WeightStore& store, const ArchConfig& arch, const Genotype& genotype,
                         const Dataset& data, std::span<const std::size_t> indices, const Normalizer& norm,
                         int batch_size, BnMode mode) {
    if (indices.empty()) throw Error("evaluate: no samples");
    const ComputeGraph graph = build_graph(genotype, arch);
    const BoundModel model = activate(store, graph, MissingKeys::Overlay);
    int correct = 0;
    const auto b = static_cast<std::size_t>(std::max(batch_size, 1));
    for (std::size_t start = 0; start < indices.size(); start += b) {
        const auto idx = indices.subspan(start, std::min(b, indices.size() - start));
        const Tensor x = make_batch(data, idx, norm);
        const auto labels = batch_labels(data, idx);
        correct += count_correct(model.forward(x, mode), labels);
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

StepResult sgd_train_step(WeightStore& store, const BoundModel& model, const Tensor& batch,
                          std::span<const int> labels, double lr, const SearchConfig& cfg) {
    StepResult res;
    Tape tape;
    {
        TapeScope scope(tape);
        const Tensor logits = model.forward(batch, BnMode::Train);
        const Tensor loss = softmax_cross_entropy(logits, labels);
        res.loss = loss.item();
        if (!std::isfinite(res.loss)) throw NumericError("training step: non-finite loss");
        res.correct = count_correct(logits, labels);
        backward(tape, loss);
    }
    const auto params = model.parameters();
    double sq = 0.0;
    for (const auto& [key, p] : params) {
        check_finite(p.grad(), key.c_str());
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    const double factor = cfg.grad_clip > 0.0 && norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
    std::vector<double> g;
    for (const auto& [key, p] : params) {
        ParamEntry* entry = store.find(key);
        if (entry == nullptr) throw Error("training step: parameter '" + key + "' is not in the store");
        const auto grad = p.grad();
        auto value = entry->value.data_mut();
        g.assign(grad.begin(), grad.end());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = g[i] * factor + cfg.weight_decay * value[i];
        if (entry->momentum.empty()) entry->momentum.assign(g.size(), 0.0);
        sgd_nesterov_step(value, g, entry->momentum, lr, cfg.momentum);
    }
    tape.clear();
    return res;
}

EpochStats train_one_shot_epoch(WeightStore& store, const Controller& controller, const SearchData& data,
                                const SearchConfig& cfg, std::uint64_t seed, int epoch,
                                const std::optional<Genotype>& forced) {
    if (cfg.search_augment.cutout > 0) throw Error("cutout is not allowed during the search phase");
    const std::size_t n = data.train.size();
    if (n == 0) throw Error("one-shot epoch: empty training split");
    const auto order = epoch_order(n, substream_seed(seed, "data"), static_cast<std::uint64_t>(epoch));
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const int num_batches = static_cast<int>((n + bs - 1) / bs);
    EpochStats stats;
    int correct = 0;
    for (int b = 0; b < num_batches; ++b) {
        const auto idx = slice(order, static_cast<std::size_t>(b) * bs, bs);
        Genotype genotype;
        if (forced) {
            genotype = *forced;
        } else {
            std::mt19937_64 rng(stream(seed, "oneshot-sample", static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(b)));
            genotype = decode_tokens(controller.sample(rng).tokens, controller.config().grammar);
        }
        const ComputeGraph graph = build_graph(genotype, cfg.search_arch);
        const BoundModel model = activate(store, graph);
        Tensor x = make_batch(data.train, idx, data.norm);
        std::mt19937_64 aug(stream(seed, "oneshot-augment", static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(b)));
        augment(x, cfg.search_augment, aug);
        const double lr = cosine_lr(cfg.schedule, epoch + static_cast<double>(b) / num_batches);
        if (b == 0) stats.lr_start = lr;
        stats.lr_end = lr;
        StepResult r;
        try {
            r = sgd_train_step(store, model, x, batch_labels(data.train, idx), lr, cfg);
        } catch (const NumericError& e) {
            throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
        }
        stats.loss += r.loss;
        correct += r.correct;
    }
    stats.batches = num_batches;
    stats.loss /= num_batches;
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    return stats;
}

PhaseStats train_controller_phase(const WeightStore& store, Controller& controller, const SearchData& data,
                                  const SearchConfig& cfg, std::uint64_t seed, int epoch,
                                  const RewardFn& reward_override) {
    if (data.val.size() == 0) throw Error("controller phase: empty validation split");
    PhaseStats stats;
    for (int u = 0; u < cfg.controller_updates; ++u) {
        std::vector<Episode> episodes;
        for (int e = 0; e < cfg.controller_episodes; ++e) {
            std::mt19937_64 rng(stream(seed, "controller-sample", static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(u * 100000 + e)));
            Episode ep = controller.sample(rng);
            const Genotype g = decode_tokens(ep.tokens, controller.config().grammar);
            if (reward_override) {
                ep.reward = reward_override(g, ep.tokens);
            } else {
                const auto idx = reward_batch_indices(data.val.size(), cfg.batch_size, seed, epoch, u, e);
                ep.reward = evaluate_accuracy(store, cfg.search_arch, g, data.val, idx, data.norm, cfg.batch_size);
            }
            episodes.push_back(std::move(ep));
        }
        controller.reinforce_update(episodes);
        for (auto& ep : episodes) stats.episodes.push_back(std::move(ep));
    }
    double total = 0.0;
    for (const auto& ep : stats.episodes) total += ep.reward;
    stats.mean_reward = stats.episodes.empty() ? 0.0 : total / static_cast<double>(stats.episodes.size());
    stats.baseline = controller.baseline();
    return stats;
}

std::string search_record_json(const SearchRecord& r) {
    json j;
    j["schema"] = kSearchLogSchema;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["train_accuracy"] = r.train_accuracy;
    j["batches"] = r.batches;
    j["lr"] = r.lr;
    j["mean_reward"] = r.mean_reward;
    j["baseline"] = r.baseline;
    j["rewards"] = r.rewards;
    j["best_genotype"] = r.best_genotype;
    j["best_reward"] = r.best_reward;
    j["store_digest"] = hex64(r.store_digest);
    j["controller_digest"] = hex64(r.controller_digest);
    return j.dump();
}

SearchRecord search_record_from_json(const std::string& line) {
    const json j = json::parse(line);
    if (j.at("schema").get<int>() != kSearchLogSchema) throw Error("search log: unsupported schema");
    SearchRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.train_loss = j.at("train_loss").get<double>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.batches = j.at("batches").get<int>();
    r.lr = j.at("lr").get<double>();
    r.mean_reward = j.at("mean_reward").get<double>();
    r.baseline = j.at("baseline").get<double>();
    r.rewards = j.at("rewards").get<std::vector<double>>();
    r.best_genotype = j.at("best_genotype").get<std::string>();
    r.best_reward = j.at("best_reward").get<double>();
    r.store_digest = parse_hex64(j.at("store_digest").get<std::string>());
    r.controller_digest = parse_hex64(j.at("controller_digest").get<std::string>());
    return r;
}

void save_search_checkpoint(const SearchResult& state, const std::filesystem::path& path) {
    WeightStore copy = state.store;
    copy.set_section("controller", state.controller.serialize());
    json j;
    j["schema"] = kSearchLogSchema;
    j["records"] = json::array();
    for (const auto& r : state.log) j["records"].push_back(search_record_json(r));
    copy.set_section("search_state", j.dump());
    const auto tmp = path.string() + ".tmp";
    save_checkpoint(copy, tmp);
    std::filesystem::rename(tmp, path);
}

SearchResult load_search_checkpoint(const std::filesystem::path& path) {
    WeightStore store = load_checkpoint(path);
    const std::string* ctrl = store.section("controller");
    const std::string* state = store.section("search_state");
    if (ctrl == nullptr || state == nullptr) {
        throw CheckpointError(path.string() + ": not a search checkpoint (missing controller or search_state)");
    }
    SearchResult out{store, Controller::deserialize(*ctrl), {}};
    const json j = json::parse(*state);
    for (const auto& line : j.at("records")) out.log.push_back(search_record_from_json(line.get<std::string>()));
    return out;
}

SearchResult run_search(const SearchConfig& cfg, const SearchData& data, std::uint64_t seed,
                        const SearchOptions& options) {
    if (cfg.epochs < 1) throw Error("search: epochs must be positive");
    SearchResult st{WeightStore(substream_seed(seed, "weights")),
                    Controller(cfg.controller, substream_seed(seed, "controller")), {}};
    if (!options.resume_from.empty()) st = load_search_checkpoint(options.resume_from);

    std::ofstream log_out, timing_out;
    if (!options.out_dir.empty()) {
        std::filesystem::create_directories(options.out_dir);
        // Rewrite the log from the checkpoint so it never holds epochs the
        // checkpoint does not know about.
        log_out.open(options.out_dir / "search_log.jsonl", std::ios::trunc);
        for (const auto& r : st.log) log_out << search_record_json(r) << '\n';
        timing_out.open(options.out_dir / "timing.jsonl", std::ios::app);
    }

    std::string best = st.log.empty() ? "" : st.log.back().best_genotype;
    double best_reward = st.log.empty() ? -1.0 : st.log.back().best_reward;
    for (int epoch = static_cast<int>(st.log.size()); epoch < cfg.epochs; ++epoch) {
        if (options.stop_after >= 0 && epoch >= options.stop_after) break;
        const auto t0 = std::chrono::steady_clock::now();

        const std::uint64_t ctrl_before = st.controller.digest();
        const EpochStats es = train_one_shot_epoch(st.store, st.controller, data, cfg, seed, epoch);
        if (st.controller.digest() != ctrl_before) throw Error("phase isolation: one-shot phase changed the controller");
        const auto t1 = std::chrono::steady_clock::now();

        const std::uint64_t store_before = st.store.digest();
        const PhaseStats ps = train_controller_phase(st.store, st.controller, data, cfg, seed, epoch);
        if (st.store.digest() != store_before) throw Error("phase isolation: controller phase changed shared weights");
        const auto t2 = std::chrono::steady_clock::now();

        SearchRecord rec;
        rec.epoch = epoch;
        rec.train_loss = es.loss;
        rec.train_accuracy = es.accuracy;
        rec.batches = es.batches;
        rec.lr = es.lr_start;
        rec.mean_reward = ps.mean_reward;
        rec.baseline = ps.baseline;
        for (const auto& ep : ps.episodes) {
            rec.rewards.push_back(ep.reward);
            if (ep.reward > best_reward) {
                best_reward = ep.reward;
                best = tokens_to_string(ep.tokens);
            }
        }
        rec.best_genotype = best;
        rec.best_reward = best_reward;
        rec.store_digest = st.store.digest();
        rec.controller_digest = st.controller.digest();
        st.log.push_back(rec);

        if (!options.out_dir.empty()) {
            log_out << search_record_json(rec) << '\n';
            log_out.flush();
            json t;
            t["epoch"] = epoch;
            t["one_shot_seconds"] = std::chrono::duration<double>(t1 - t0).count();
            t["controller_seconds"] = std::chrono::duration<double>(t2 - t1).count();
            timing_out << t.dump() << '\n';
            timing_out.flush();
            save_search_checkpoint(st, options.out_dir / "search.ckpt");
        }
    }
    return st;
}

std::vector<Candidate> derive(const Controller& controller, const WeightStore& store, const SearchData& data,
                              const SearchConfig& cfg, std::uint64_t seed, int n) {
    if (n < 1) throw Error("derive: candidate count must be positive");
    std::vector<std::size_t> all(data.val.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::vector<Candidate> out;
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(stream(seed, "derive", static_cast<std::uint64_t>(i)));
        Candidate c;
        c.tokens = controller.sample(rng).tokens;
        c.genotype = decode_tokens(c.tokens, controller.config().grammar);
        c.score = evaluate_accuracy(store, cfg.search_arch, c.genotype, data.val, all, data.norm, cfg.batch_size);
        out.push_back(std::move(c));
    }
    std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    return out;
}

FinalResult final_train(const Genotype& genotype, const SearchConfig& cfg, const SearchData& data,
                        const Dataset& test, std::uint64_t seed, int epochs) {
    FinalResult res;
    res.store = WeightStore(substream_seed(seed, "final-weights"));
    const ComputeGraph graph = build_graph(genotype, cfg.derive_arch);
    res.parameters = count_parameters(graph);
    const BoundModel model = activate(res.store, graph);
    const std::size_t n = data.train.size();
    if (n == 0) throw Error("final training: empty training split");
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const int num_batches = static_cast<int>((n + bs - 1) / bs);
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto order = epoch_order(n, substream_seed(seed, "final-data"), static_cast<std::uint64_t>(epoch));
        double loss = 0.0;
        for (int b = 0; b < num_batches; ++b) {
            const auto idx = slice(order, static_cast<std::size_t>(b) * bs, bs);
            Tensor x = make_batch(data.train, idx, data.norm);
            std::mt19937_64 aug(stream(seed, "final-augment", static_cast<std::uint64_t>(epoch),
                                       static_cast<std::uint64_t>(b)));
            augment(x, cfg.final_augment, aug);
            const double lr = cosine_lr(cfg.schedule, epoch + static_cast<double>(b) / num_batches);
            loss += sgd_train_step(res.store, model, x, batch_labels(data.train, idx), lr, cfg).loss;
        }
        res.epoch_loss.push_back(loss / num_batches);
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    res.train_accuracy =
        evaluate_accuracy(res.store, cfg.derive_arch, genotype, data.train, idx, data.norm, cfg.batch_size, BnMode::Inference);
    if (test.size() > 0) {
        std::vector<std::size_t> tidx(test.size());
        std::iota(tidx.begin(), tidx.end(), std::size_t{0});
        res.test_accuracy =
            evaluate_accuracy(res.store, cfg.derive_arch, genotype, test, tidx, data.norm, cfg.batch_size, BnMode::Inference);
    }
    return res;
}

}  // namespace broadnas
