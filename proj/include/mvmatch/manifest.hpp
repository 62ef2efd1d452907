#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace mvmatch {

enum class Domain { source, target };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

// One photo. view_id indexes the photo within its (container, capture_date)
// group and carries no geometric meaning.
struct ImageRecord {
    std::string id;
    std::string path;
    Domain domain = Domain::source;
    std::string genotype;
    std::string container_id;
    std::string capture_date;  // YYYY-MM-DD
    int view_id = 0;
    std::optional<int> label;

    bool operator==(const ImageRecord&) const = default;
};

// A target-domain record with the treatment label removed. Training code only
// ever sees target data in this form.
struct UnlabeledRecord {
    std::string id;
    std::string path;
    std::string container_id;
    std::string capture_date;
    int view_id = 0;
};

struct DatasetManifest {
    std::vector<ImageRecord> records;  // sorted by id
    std::vector<std::string> class_names;

    int class_count() const { return static_cast<int>(class_names.size()); }
    const ImageRecord* find(std::string_view id) const;
    std::set<std::string> containers() const;

    bool operator==(const DatasetManifest&) const = default;
};

struct SplitSpec {
    std::set<std::string> heldout_containers;
};

struct SynthConfig {
    int class_count = 4;
    int containers_per_class_per_domain = 12;
    int dates = 2;
    int views_per_container_per_date = 8;
    int image_size = 32;
    // Target-domain shift: rgb' = M * rgb + bias + N(0, noise_sigma^2), clamped.
    std::array<double, 9> color_matrix{0.56, 0.36, 0.08,
                                       0.08, 0.56, 0.36,
                                       0.36, 0.08, 0.56};
    std::array<double, 3> color_bias{0.05, 0.05, 0.05};
    double noise_sigma = 0.05;
    // Per-container hue offset drawn from [-hue_jitter, hue_jitter] (hue in [0, 1)).
    double hue_jitter = 0.05;
    // Per-view jitter.
    int max_crop_offset = 3;
    double brightness_range = 0.15;
    // Fraction of views in each (container, date) group rendered as near copies
    // of view 0.
    double near_duplicate_fraction = 0.0;
    std::uint64_t seed = 7;

    void validate() const;
    // Identity color matrix, zero bias and zero noise.
    void disable_domain_shift();
};

DatasetManifest load_manifest(const std::filesystem::path& path);
DatasetManifest parse_manifest(std::string_view text);
std::string serialize_manifest(const DatasetManifest& manifest);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Throws DataError on duplicate (container, date, view) keys, duplicate ids,
// unlabeled source records and out-of-range labels.
void validate_manifest(const DatasetManifest& manifest);

std::pair<DatasetManifest, DatasetManifest> split_by_container(const DatasetManifest& manifest,
                                                               const SplitSpec& spec);

// The first ceil(n/4) containers (by sorted id) of every (domain, treatment)
// pair, which holds out about a quarter of the containers.
SplitSpec auto_holdout(const DatasetManifest& manifest);

DatasetManifest filter_domain(const DatasetManifest& manifest, Domain domain);
std::vector<UnlabeledRecord> strip_labels(const DatasetManifest& target_part);

// Same container, same date, same domain, different view; sorted by view_id.
std::vector<ImageRecord> view_candidates(const ImageRecord& query, const DatasetManifest& manifest);

// Renders the two-domain dataset into out_dir/images and writes
// out_dir/manifest.jsonl. Deterministic in config.seed.
DatasetManifest generate_synthetic(const SynthConfig& config, const std::filesystem::path& out_dir);

class Image;
// The raster generate_synthetic writes for one record, before PNG quantization.
Image render_synthetic(const SynthConfig& config, Domain domain, int class_index,
                       int container_index, int date_index, int view_index);

}  // namespace mvmatch
