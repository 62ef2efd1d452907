#include "mvmatch/viewmining.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "mvmatch/error.hpp"

namespace mvmatch {

using ordered_json = nlohmann::ordered_json;

Histogram JointHistogram::row_marginal() const {
    Histogram h{std::vector<std::uint64_t>(bins, 0), total};
    for (int r = 0; r < bins; ++r)
        for (int c = 0; c < bins; ++c) h.counts[r] += at(r, c);
    return h;
}

Histogram JointHistogram::column_marginal() const {
    Histogram h{std::vector<std::uint64_t>(bins, 0), total};
    for (int r = 0; r < bins; ++r)
        for (int c = 0; c < bins; ++c) h.counts[c] += at(r, c);
    return h;
}

QuantizedRaster quantize_gray(const Image& img, int bins, int side) {
    if (bins < 2) throw ConfigError("histogram needs at least 2 bins");
    if (bins > 65535) throw ConfigError("histogram bin count too large");
    if (side < 2) throw ConfigError("histogram side must be >= 2");
    Image gray(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const double v = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
            for (int c = 0; c < 3; ++c) gray.at(y, x, c) = v;
        }
    }
    const Image resized = resize_bilinear(gray, side, side);
    QuantizedRaster q{side, bins, std::vector<std::uint16_t>(static_cast<std::size_t>(side) * side)};
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            const double v = resized.at(y, x, 0);
            const long bin = static_cast<long>(std::floor(v * bins));
            q.values[static_cast<std::size_t>(y) * side + x] =
                static_cast<std::uint16_t>(std::clamp(bin, 0L, static_cast<long>(bins - 1)));
        }
    }
    return q;
}

Histogram histogram_of(const QuantizedRaster& raster) {
    Histogram h{std::vector<std::uint64_t>(raster.bins, 0), 0};
    for (auto v : raster.values) ++h.counts[v];
    h.total = raster.values.size();
    return h;
}

Histogram grayscale_histogram(const Image& img, int bins, int side) {
    return histogram_of(quantize_gray(img, bins, side));
}

JointHistogram joint_histogram(const QuantizedRaster& a, const QuantizedRaster& b) {
    if (a.bins != b.bins || a.side != b.side)
        throw ConfigError("joint histogram needs rasters with equal bins and side");
    JointHistogram j{a.bins, std::vector<std::uint64_t>(static_cast<std::size_t>(a.bins) * a.bins, 0),
                     a.values.size()};
    for (std::size_t i = 0; i < a.values.size(); ++i)
        ++j.counts[static_cast<std::size_t>(a.values[i]) * a.bins + b.values[i]];
    return j;
}

namespace {

// Terms are summed in ascending count order, so the result does not depend on
// bin layout: a joint histogram and its transpose give bit-identical entropies,
// which makes nmi(a, b) == nmi(b, a) exactly.
double entropy_of_counts(const std::vector<std::uint64_t>& counts, std::uint64_t total) {
    if (total == 0) throw DataError("entropy of an empty histogram");
    std::vector<std::uint64_t> nonzero;
    for (auto c : counts)
        if (c != 0) nonzero.push_back(c);
    std::sort(nonzero.begin(), nonzero.end());
    const double t = static_cast<double>(total);
    double h = 0.0;
    for (auto c : nonzero) {
        const double p = static_cast<double>(c) / t;
        h -= p * std::log2(p);
    }
    return h;
}

}  // namespace

double entropy(const Histogram& h) { return entropy_of_counts(h.counts, h.total); }

double joint_entropy(const JointHistogram& h) { return entropy_of_counts(h.counts, h.total); }

double nmi(const QuantizedRaster& a, const QuantizedRaster& b) {
    const JointHistogram joint = joint_histogram(a, b);
    const double ha = entropy(histogram_of(a));
    const double hb = entropy(histogram_of(b));
    const double denom = ha + hb;
    if (denom == 0.0) return a.values == b.values ? 1.0 : 0.0;
    // H(a) - H(a|b) = H(a) + H(b) - H(a,b)
    const double mutual = denom - joint_entropy(joint);
    return std::clamp(2.0 * mutual / denom, 0.0, 1.0);
}

double nmi(const Image& a, const Image& b, int bins, int side) {
    return nmi(quantize_gray(a, bins, side), quantize_gray(b, bins, side));
}

std::vector<std::string> ViewSet::member_ids() const {
    std::vector<std::string> ids;
    for (const auto& m : members) ids.push_back(m.id);
    return ids;
}

std::string_view to_string(MiningMethod m) { return m == MiningMethod::sgvm ? "sgvm" : "random"; }

MiningMethod mining_method_from_string(std::string_view s) {
    if (s == "sgvm") return MiningMethod::sgvm;
    if (s == "random") return MiningMethod::random;
    throw ConfigError("unknown mining method '" + std::string(s) + "'");
}

NmiScorer::NmiScorer(const ImageStore& store, int bins, int side)
    : store_(store), bins_(bins), side_(side) {
    if (bins < 2 || side < 2) throw ConfigError("NMI bins and side must be >= 2");
}

const QuantizedRaster& NmiScorer::raster(const ImageRecord& r) {
    {
        std::shared_lock lock(mutex_);
        if (auto it = rasters_.find(r.id); it != rasters_.end()) return it->second;
    }
    QuantizedRaster q = quantize_gray(store_.get(r.id, r.path), bins_, side_);
    std::unique_lock lock(mutex_);
    return rasters_.try_emplace(r.id, std::move(q)).first->second;
}

double NmiScorer::score(const ImageRecord& a, const ImageRecord& b) {
    const bool swap = b.id < a.id;
    const ImageRecord& first = swap ? b : a;
    const ImageRecord& second = swap ? a : b;
    auto key = std::make_tuple(first.id, second.id, bins_, side_);
    {
        std::shared_lock lock(mutex_);
        if (auto it = pairs_.find(key); it != pairs_.end()) return it->second;
    }
    const double value = nmi(raster(first), raster(second));
    std::unique_lock lock(mutex_);
    pairs_.emplace(std::move(key), value);
    return value;
}

std::size_t NmiScorer::cached_pairs() const {
    std::shared_lock lock(mutex_);
    return pairs_.size();
}

ViewSet select_least_similar(const ImageRecord& query, const std::vector<ImageRecord>& candidates,
                             const std::vector<double>& scores, int n) {
    if (scores.size() != candidates.size()) throw ConfigError("one score per candidate required");
    const std::size_t keep = std::min<std::size_t>(std::max(n, 0), candidates.size());
    std::vector<std::size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t i, std::size_t j) {
                          if (scores[i] != scores[j]) return scores[i] < scores[j];
                          return candidates[i].view_id < candidates[j].view_id;
                      });
    ViewSet vs{query.id, {}};
    for (std::size_t k = 0; k < keep; ++k) {
        const std::size_t i = order[k];
        vs.members.push_back({candidates[i].id, candidates[i].view_id, scores[i]});
    }
    return vs;
}

ViewSet sgvm_select(const ImageRecord& query, const std::vector<ImageRecord>& candidates, int n,
                    NmiScorer& scorer) {
    std::vector<double> scores;
    scores.reserve(candidates.size());
    for (const auto& c : candidates) scores.push_back(scorer.score(query, c));
    return select_least_similar(query, candidates, scores, n);
}

ViewSet random_select(const ImageRecord& query, const std::vector<ImageRecord>& candidates, int n,
                      Rng& rng) {
    const std::size_t keep = std::min<std::size_t>(std::max(n, 0), candidates.size());
    std::vector<std::size_t> idx(candidates.size());
    std::iota(idx.begin(), idx.end(), 0);
    // Partial Fisher-Yates.
    for (std::size_t k = 0; k < keep; ++k) {
        const std::size_t j = k + rng.below(idx.size() - k);
        std::swap(idx[k], idx[j]);
    }
    idx.resize(keep);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return candidates[a].view_id < candidates[b].view_id; });
    ViewSet vs{query.id, {}};
    for (std::size_t i : idx) vs.members.push_back({candidates[i].id, candidates[i].view_id, std::nullopt});
    return vs;
}

std::map<std::string, ViewSet> mine_views(const DatasetManifest& manifest, const MiningOptions& options,
                                          NmiScorer& scorer) {
    if (options.n < 1) throw ConfigError("view count n must be >= 1");
    const auto& records = manifest.records;
    std::vector<ViewSet> results(records.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;

    auto worker = [&] {
        for (std::size_t i = next++; i < records.size(); i = next++) {
            try {
                const auto& q = records[i];
                const auto candidates = view_candidates(q, manifest);
                if (options.method == MiningMethod::sgvm) {
                    results[i] = sgvm_select(q, candidates, options.n, scorer);
                } else {
                    Rng rng(derive_seed(options.seed, q.id));
                    results[i] = random_select(q, candidates, options.n, rng);
                }
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = records.size();
            }
        }
    };

    unsigned threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = std::min<unsigned>(threads, std::max<std::size_t>(1, records.size()));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);

    std::map<std::string, ViewSet> out;
    for (std::size_t i = 0; i < records.size(); ++i) out.emplace(records[i].id, std::move(results[i]));
    return out;
}

std::string serialize_view_sets(const std::map<std::string, ViewSet>& sets) {
    std::string out;
    for (const auto& [id, vs] : sets) {
        ordered_json line;
        line["query"] = id;
        line["views"] = ordered_json::array();
        for (const auto& m : vs.members) {
            ordered_json v;
            v["id"] = m.id;
            v["nmi"] = m.nmi ? ordered_json(*m.nmi) : ordered_json(nullptr);
            line["views"].push_back(std::move(v));
        }
        out += line.dump() + "\n";
    }
    return out;
}

void save_view_sets(const std::map<std::string, ViewSet>& sets, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write view file " + path.string());
    out << serialize_view_sets(sets);
}

std::map<std::string, ViewSet> load_view_sets(const std::filesystem::path& path,
                                              const DatasetManifest& manifest) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open view file " + path.string());
    std::map<std::string, ViewSet> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = ordered_json::parse(line);
            ViewSet vs;
            vs.query_id = j.at("query").get<std::string>();
            if (!manifest.find(vs.query_id)) throw DataError("unknown query id '" + vs.query_id + "'");
            for (const auto& v : j.at("views")) {
                ViewMember m;
                m.id = v.at("id").get<std::string>();
                const ImageRecord* r = manifest.find(m.id);
                if (!r) throw DataError("unknown view id '" + m.id + "'");
                m.view_id = r->view_id;
                if (!v.at("nmi").is_null()) m.nmi = v.at("nmi").get<double>();
                vs.members.push_back(std::move(m));
            }
            out.emplace(vs.query_id, std::move(vs));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("view file parse error at line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace mvmatch
