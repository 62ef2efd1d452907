#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "mvmatch/image_store.hpp"
#include "mvmatch/imaging.hpp"
#include "mvmatch/manifest.hpp"
#include "mvmatch/rng.hpp"

namespace mvmatch {

inline constexpr int kDefaultNmiBins = 64;
inline constexpr int kDefaultNmiSide = 64;
inline constexpr int kDefaultViewCount = 5;

struct Histogram {
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;

    bool operator==(const Histogram&) const = default;
};

// Grayscale raster resized to side x side and quantized to bin indices.
struct QuantizedRaster {
    int side = 0;
    int bins = 0;
    std::vector<std::uint16_t> values;

    bool operator==(const QuantizedRaster&) const = default;
};

// B x B counts over spatially aligned pixel pairs; row index from the first
// raster, column index from the second.
struct JointHistogram {
    int bins = 0;
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;

    std::uint64_t at(int row, int col) const { return counts[static_cast<std::size_t>(row) * bins + col]; }
    Histogram row_marginal() const;
    Histogram column_marginal() const;
};

// Luma (0.299, 0.587, 0.114), bilinear resize, bin = floor(v * B) clamped to B - 1.
QuantizedRaster quantize_gray(const Image& img, int bins, int side);
Histogram histogram_of(const QuantizedRaster& raster);
Histogram grayscale_histogram(const Image& img, int bins, int side);
JointHistogram joint_histogram(const QuantizedRaster& a, const QuantizedRaster& b);

// Shannon entropy in bits over non-empty bins.
double entropy(const Histogram& h);
double joint_entropy(const JointHistogram& h);

// 2 (H(a) - H(a|b)) / (H(a) + H(b)), clamped to [0, 1]. When both entropies
// are zero the score is 1 for identical rasters and 0 otherwise.
double nmi(const QuantizedRaster& a, const QuantizedRaster& b);
double nmi(const Image& a, const Image& b, int bins = kDefaultNmiBins, int side = kDefaultNmiSide);

struct ViewMember {
    std::string id;
    int view_id = 0;
    std::optional<double> nmi;  // unset for randomly sampled sets

    bool operator==(const ViewMember&) const = default;
};

struct ViewSet {
    std::string query_id;
    std::vector<ViewMember> members;

    std::vector<std::string> member_ids() const;
    bool operator==(const ViewSet&) const = default;
};

enum class MiningMethod { sgvm, random };
std::string_view to_string(MiningMethod m);
MiningMethod mining_method_from_string(std::string_view s);

// Pairwise NMI between manifest images, memoized by (id, id, bins, side).
// Scores are computed with the lexicographically smaller id first so the
// cached value does not depend on call order.
class NmiScorer {
public:
    NmiScorer(const ImageStore& store, int bins = kDefaultNmiBins, int side = kDefaultNmiSide);

    double score(const ImageRecord& a, const ImageRecord& b);
    const QuantizedRaster& raster(const ImageRecord& r);

    int bins() const { return bins_; }
    int side() const { return side_; }
    std::size_t cached_pairs() const;

private:
    const ImageStore& store_;
    int bins_;
    int side_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, QuantizedRaster, std::less<>> rasters_;
    std::map<std::tuple<std::string, std::string, int, int>, double> pairs_;
};

// Keeps the min(n, |candidates|) candidates with the lowest score, ordered by
// (score, view_id). scores[i] belongs to candidates[i].
ViewSet select_least_similar(const ImageRecord& query, const std::vector<ImageRecord>& candidates,
                             const std::vector<double>& scores, int n);

ViewSet sgvm_select(const ImageRecord& query, const std::vector<ImageRecord>& candidates, int n,
                    NmiScorer& scorer);

// Uniform sample without replacement; members reported in view_id order.
ViewSet random_select(const ImageRecord& query, const std::vector<ImageRecord>& candidates, int n,
                      Rng& rng);

struct MiningOptions {
    int n = kDefaultViewCount;
    MiningMethod method = MiningMethod::sgvm;
    std::uint64_t seed = 0;  // random mining: per-query streams derive from (seed, query id)
    unsigned threads = 0;    // 0 = hardware concurrency
};

// One ViewSet per manifest record, keyed by record id.
std::map<std::string, ViewSet> mine_views(const DatasetManifest& manifest, const MiningOptions& options,
                                          NmiScorer& scorer);

// JSON-lines: {"query": id, "views": [{"id": ..., "nmi": ...}, ...]}
std::string serialize_view_sets(const std::map<std::string, ViewSet>& sets);
void save_view_sets(const std::map<std::string, ViewSet>& sets, const std::filesystem::path& path);
// view_id of each member is resolved against the manifest.
std::map<std::string, ViewSet> load_view_sets(const std::filesystem::path& path,
                                              const DatasetManifest& manifest);

}  // namespace mvmatch
