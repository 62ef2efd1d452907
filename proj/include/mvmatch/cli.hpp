#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "mvmatch/eval.hpp"
#include "mvmatch/image_store.hpp"
#include "mvmatch/manifest.hpp"
#include "mvmatch/trainer.hpp"
#include "mvmatch/viewmining.hpp"

namespace mvmatch {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

// Runs one subcommand (gen-data, mine-views, train, eval, ablate). args excludes
// the program name. Errors are reported on err and mapped to ExitCode.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// git-style object id: sha1("blob <size>\0" + bytes), lowercase hex.
std::string git_blob_sha1(std::string_view bytes);
// sha1 over the manifest bytes followed by every image file in record order.
std::string dataset_hash(const std::filesystem::path& manifest_path);

// "auto" or a comma-separated container list.
SplitSpec parse_holdout(const DatasetManifest& manifest, std::string_view holdout);

// A manifest bound to a container split. The target training part is label-stripped.
struct Experiment {
    std::filesystem::path manifest_path;
    DatasetManifest manifest;
    SplitSpec holdout;
    DatasetManifest source_train;
    std::vector<UnlabeledRecord> target_train;
    DatasetManifest source_test;
    DatasetManifest target_test;
    std::unique_ptr<ImageStore> images;
};

std::unique_ptr<Experiment> load_experiment(const std::filesystem::path& manifest_path, std::string_view holdout);

std::map<std::string, ViewSet> mine_for_config(const Experiment& ex, const TrainConfig& config, NmiScorer& scorer,
                                               unsigned threads = 0);

// Trains and evaluates on the target test split after every epoch.
TrainResult run_experiment(const Experiment& ex, const TrainConfig& config,
                           const std::map<std::string, ViewSet>& view_sets,
                           const std::function<void(const EpochMetrics&)>& on_epoch = {});

}  // namespace mvmatch
