// SPDX-License-Identifier: Apache-2.0
//
// Two-phase search loop, derivation and final training.
//
// Every random decision draws from a stream named by (seed, purpose, epoch,
// ...), so a run resumed from an epoch checkpoint continues exactly as the
// uninterrupted run would.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "broadnas/broad_builder.hpp"
#include "broadnas/controller.hpp"
#include "broadnas/data_io.hpp"
#include "broadnas/executor.hpp"
#include "broadnas/optim.hpp"
#include "broadnas/weight_store.hpp"

namespace broadnas {

struct SearchConfig {
    int epochs = 150;
    int batch_size = 128;
    LrSchedule schedule{};
    double momentum = 0.9;
    double weight_decay = 0.0;
    double grad_clip = 5.0;  // global gradient norm; 0 disables
    int controller_episodes = 30;
    int controller_updates = 1;  // REINFORCE steps per controller phase
    ArchConfig search_arch{};    // k = 0, v = v_s
    ArchConfig derive_arch{};    // k = k_d, v = v_d
    int derive_candidates = 10;
    int final_epochs = 20;
    AugmentSpec search_augment{true, 4, true, 0.5, 0};
    AugmentSpec final_augment{true, 4, true, 0.5, 16};
    ControllerConfig controller{};
};

/// Train/validation data in byte form plus the normalizer applied to batches.
struct SearchData {
    Dataset train;
    Dataset val;
    Normalizer norm;
};

struct EpochStats {
    double loss = 0.0;      // mean over batches
    double accuracy = 0.0;  // training accuracy of the sampled children
    int batches = 0;
    double lr_start = 0.0;
    double lr_end = 0.0;
};

struct PhaseStats {
    std::vector<Episode> episodes;  // rewards filled, all updates
    double mean_reward = 0.0;       // over every episode of the phase
    double baseline = 0.0;          // after the phase
};

/// Validation indices of the reward mini-batch for one episode.
std::vector<std::size_t> reward_batch_indices(std::size_t val_size, int batch_size, std::uint64_t seed, int epoch,
                                              int update, int episode);

/// Accuracy on `indices` of the child `genotype` with inherited weights.
/// Batch-norm uses batch statistics; the store is not modified.
double evaluate_accuracy(const WeightStore& store, const ArchConfig& arch, const Genotype& genotype,
                         const Dataset& data, std::span<const std::size_t> indices, const Normalizer& norm,
                         int batch_size, BnMode mode = BnMode::BatchStats);

struct StepResult {
    double loss = 0.0;
    int correct = 0;
};

/// One SGD step (Nesterov momentum, optional weight decay and clipping) on
/// the parameters of `model`. Momentum buffers live in the store entries.
StepResult sgd_train_step(WeightStore& store, const BoundModel& model, const Tensor& batch,
                          std::span<const int> labels, double lr, const SearchConfig& cfg);

/// Phase 1: one pass over the training split; each mini-batch trains one
/// sampled child. The controller is read-only. `forced` pins the genotype.
EpochStats train_one_shot_epoch(WeightStore& store, const Controller& controller, const SearchData& data,
                                const SearchConfig& cfg, std::uint64_t seed, int epoch,
                                const std::optional<Genotype>& forced = std::nullopt);

/// Phase 2: sample episodes, reward each with one validation mini-batch,
/// REINFORCE. The store is read-only. `reward_override` replaces the
/// accuracy (rigged environments in tests).
using RewardFn = std::function<double(const Genotype&, const TokenSequence&)>;
PhaseStats train_controller_phase(const WeightStore& store, Controller& controller, const SearchData& data,
                                  const SearchConfig& cfg, std::uint64_t seed, int epoch,
                                  const RewardFn& reward_override = nullptr);

struct SearchRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    int batches = 0;
    double lr = 0.0;
    double mean_reward = 0.0;
    double baseline = 0.0;
    std::vector<double> rewards;
    std::string best_genotype;  // token list, space separated
    double best_reward = 0.0;
    std::uint64_t store_digest = 0;
    std::uint64_t controller_digest = 0;
};

inline constexpr int kSearchLogSchema = 1;

std::string search_record_json(const SearchRecord& r);
SearchRecord search_record_from_json(const std::string& line);

struct SearchOptions {
    std::filesystem::path out_dir;      // empty: keep everything in memory
    std::filesystem::path resume_from;  // search checkpoint to continue from
    int stop_after = -1;                // stop once this many epochs are complete
};

struct SearchResult {
    WeightStore store;
    Controller controller;
    std::vector<SearchRecord> log;
};

/// Alternates the two phases for cfg.epochs epochs. With an output directory
/// it appends search_log.jsonl and timing.jsonl and rewrites search.ckpt
/// after every epoch.
SearchResult run_search(const SearchConfig& cfg, const SearchData& data, std::uint64_t seed,
                        const SearchOptions& options = {});

void save_search_checkpoint(const SearchResult& state, const std::filesystem::path& path);
SearchResult load_search_checkpoint(const std::filesystem::path& path);

struct Candidate {
    Genotype genotype;
    TokenSequence tokens;
    double score = 0.0;
};

/// Samples n genotypes, scores each on the whole validation split with
/// inherited weights, returns them best first.
std::vector<Candidate> derive(const Controller& controller, const WeightStore& store, const SearchData& data,
                              const SearchConfig& cfg, std::uint64_t seed, int n);

struct FinalResult {
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
    std::size_t parameters = 0;
    WeightStore store;
};

/// Trains `genotype` under cfg.derive_arch from fresh weights for `epochs`
/// epochs with cfg.final_augment; accuracies use running statistics.
FinalResult final_train(const Genotype& genotype, const SearchConfig& cfg, const SearchData& data,
                        const Dataset& test, std::uint64_t seed, int epochs);

/// Digit-string form of a token sequence and back.
std::string tokens_to_string(const TokenSequence& tokens);
TokenSequence tokens_from_string(const std::string& text);

}  // namespace broadnas
