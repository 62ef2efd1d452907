#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvmatch/image_store.hpp"
#include "mvmatch/imaging.hpp"
#include "mvmatch/losses.hpp"
#include "mvmatch/manifest.hpp"
#include "mvmatch/model.hpp"
#include "mvmatch/rng.hpp"
#include "mvmatch/viewmining.hpp"

namespace mvmatch {

struct TrainConfig {
    int epochs = 10;
    int source_batch = 4;
    int target_batch = 4;
    double lr0 = 3e-3;
    double momentum = 0.9;
    double weight_decay = 1e-3;
    double alpha = 8.0;
    double beta = 0.75;
    int n_views = kDefaultViewCount;
    MiningMethod mining = MiningMethod::sgvm;
    LossConfig loss;  // loss.tau is the confidence threshold
    AugPolicy strong = AugPolicy::default_strong();
    Normalization norm = Normalization::imagenet();
    int input_side = 32;
    int nmi_bins = kDefaultNmiBins;
    int nmi_side = kDefaultNmiSide;
    std::uint64_t seed = 0;

    void validate() const;

    // Sets one field from its text form; returns false for unknown keys.
    // "loss_preset" replaces the whole LossConfig.
    bool set(std::string_view key, std::string_view value);
    // Every field as key/value text; set() on each pair reproduces the config.
    std::vector<std::pair<std::string, std::string>> to_key_values() const;
};

// Flat "key = value" lines; '#' starts a comment. Keys are returned in file order.
std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text);

// lr0 / (1 + alpha p)^beta
double lr_schedule(double progress, double lr0, double alpha, double beta);

// Weight decay folded into the gradient, then heavy-ball momentum:
// g = grads + wd * params; buf = momentum * buf + g; params -= lr * buf.
void sgd_step(ModelParams& params, Gradients& momentum_buffer, const Gradients& grads, double lr,
              double momentum, double weight_decay);

// Per-role row ranges inside a stacked [N, 3, S, S] batch. Roles appear in
// the order src_query_wa, src_view, tgt_query_wa, tgt_query_sa, tgt_view;
// absent roles have zero rows.
struct RoleLayout {
    std::size_t source = 0;
    std::size_t target = 0;
    bool source_view = false;
    bool target_query_sa = false;
    bool target_view = false;

    std::size_t src_query_wa_begin() const { return 0; }
    std::size_t src_view_begin() const { return source; }
    std::size_t tgt_query_wa_begin() const { return src_view_begin() + (source_view ? source : 0); }
    std::size_t tgt_query_sa_begin() const { return tgt_query_wa_begin() + target; }
    std::size_t tgt_view_begin() const { return tgt_query_sa_begin() + (target_query_sa ? target : 0); }
    std::size_t rows() const { return tgt_view_begin() + (target_view ? target : 0); }

    static RoleLayout for_config(const LossConfig& config, std::size_t source, std::size_t target);
};

struct TrainBatch {
    Tensor images;  // all roles stacked, see RoleLayout
    RoleLayout layout;
    std::vector<int> source_labels;
    std::vector<std::string> source_ids;
    std::vector<std::string> target_ids;
    std::size_t self_view_fallbacks = 0;  // queries whose ViewSet was empty
};

// Everything the optimizer loop reads. The target split arrives label-stripped.
struct TrainData {
    const DatasetManifest* source_train = nullptr;
    const std::vector<UnlabeledRecord>* target_train = nullptr;
    const std::map<std::string, ViewSet>* view_sets = nullptr;
    const ImageStore* images = nullptr;
};

struct TrainState {
    ModelParams params;
    Gradients momentum;
    std::size_t step = 0;
    std::size_t total_steps = 0;
    Rng batch_rng;
    Rng aug_rng;
    Rng view_rng;

    // Source epoch order and the independently shuffled target stream.
    std::vector<std::size_t> source_order;
    std::size_t source_cursor = 0;
    std::vector<std::size_t> target_order;
    std::size_t target_cursor = 0;

    static TrainState initial(const TrainConfig& config, int classes, std::size_t total_steps);
};

// Reshuffles the source order; called at the start of every epoch.
void begin_epoch(TrainState& state, std::size_t source_count);

// Draws the next source_batch source queries (epoch order) and target_batch
// target queries (reshuffled on exhaustion), one view per query from its
// ViewSet, and applies weak/strong augmentation per role.
TrainBatch make_train_batch(TrainState& state, const TrainData& data, const TrainConfig& config);

struct StepOutcome {
    LossBreakdown breakdown;
    Gradients grads;
};

// One shared forward pass over every role, the composite loss, and backward.
// With frozen_references, reference predictions come from that argument
// instead of the current parameters (used for finite-difference checks of
// the stop-gradient loss in soft mode).
StepOutcome composite_step(const ModelParams& params, const Tensor& images, const RoleLayout& layout,
                           const std::vector<int>& source_labels, const LossConfig& config,
                           const RolePredictions* frozen_references = nullptr);

// Objective over a fixed batch for grad_check. When freeze_references is set
// the reference predictions are computed once at reference_params.
Objective composite_objective(Tensor images, RoleLayout layout, std::vector<int> source_labels,
                              LossConfig config, std::optional<ModelParams> reference_params = std::nullopt);

struct StepMetrics {
    std::size_t step = 0;
    int epoch = 0;
    double lr = 0.0;
    LossBreakdown breakdown;
};

struct EpochMetrics {
    int epoch = 0;
    std::size_t steps = 0;
    double lr_last = 0.0;
    std::array<double, kTermCount> mean_terms{};
    std::array<double, kTermCount> masked_fraction{};
    double mean_total = 0.0;
    std::size_t self_view_fallbacks = 0;
    std::optional<double> target_top1;  // filled by the epoch hook
};

struct RunReport {
    std::vector<StepMetrics> steps;
    std::vector<EpochMetrics> epochs;
    std::size_t total_steps = 0;
    std::size_t self_view_fallbacks = 0;
};

struct TrainResult {
    ModelParams params;
    RunReport report;
};

using EpochHook = std::function<void(const ModelParams&, EpochMetrics&)>;

// Runs epochs * floor(|source_train| / source_batch) steps; the trailing
// partial source batch of each epoch is dropped.
TrainResult train(const TrainConfig& config, const TrainData& data, const EpochHook& on_epoch = {});

// Stacks [N, 3, S, S] from normalized images.
Tensor stack_images(const std::vector<NormalizedImage>& images);

std::string metrics_csv(const RunReport& report);
std::string steps_csv(const RunReport& report);

}  // namespace mvmatch
