#include "mvmatch/manifest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "mvmatch/error.hpp"
#include "mvmatch/imaging.hpp"
#include "mvmatch/rng.hpp"

namespace mvmatch {

using ordered_json = nlohmann::ordered_json;

namespace {

bool valid_date(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
    for (std::size_t i : {0, 1, 2, 3, 5, 6, 8, 9})
        if (s[i] < '0' || s[i] > '9') return false;
    const int y = std::stoi(std::string(s.substr(0, 4)));
    const unsigned m = static_cast<unsigned>(std::stoi(std::string(s.substr(5, 2))));
    const unsigned d = static_cast<unsigned>(std::stoi(std::string(s.substr(8, 2))));
    return std::chrono::year_month_day{std::chrono::year{y}, std::chrono::month{m},
                                       std::chrono::day{d}}
        .ok();
}

std::string date_plus_days(std::string_view base, int days) {
    using namespace std::chrono;
    const year_month_day ymd{year{std::stoi(std::string(base.substr(0, 4)))},
                             month{static_cast<unsigned>(std::stoi(std::string(base.substr(5, 2))))},
                             day{static_cast<unsigned>(std::stoi(std::string(base.substr(8, 2))))}};
    const year_month_day out{sys_days{ymd} + std::chrono::days{days}};
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(out.year()),
                  static_cast<unsigned>(out.month()), static_cast<unsigned>(out.day()));
    return buf;
}

void sort_records(std::vector<ImageRecord>& records) {
    std::sort(records.begin(), records.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.id < b.id; });
}

ImageRecord record_from_json(const ordered_json& j) {
    ImageRecord r;
    r.id = j.at("id").get<std::string>();
    r.path = j.at("path").get<std::string>();
    r.domain = domain_from_string(j.at("domain").get<std::string>());
    r.genotype = j.at("genotype").get<std::string>();
    r.container_id = j.at("container").get<std::string>();
    r.capture_date = j.at("date").get<std::string>();
    if (!valid_date(r.capture_date)) throw DataError("invalid date '" + r.capture_date + "'");
    r.view_id = j.at("view").get<int>();
    const auto& label = j.at("label");
    if (!label.is_null()) r.label = label.get<int>();
    return r;
}

ordered_json record_to_json(const ImageRecord& r) {
    ordered_json j;
    j["id"] = r.id;
    j["path"] = r.path;
    j["domain"] = std::string(to_string(r.domain));
    j["genotype"] = r.genotype;
    j["container"] = r.container_id;
    j["date"] = r.capture_date;
    j["view"] = r.view_id;
    j["label"] = r.label ? ordered_json(*r.label) : ordered_json(nullptr);
    return j;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    const double hh = std::fmod(h, 1.0) * 6.0;
    const int sector = static_cast<int>(hh);
    const double f = hh - sector;
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (sector % 6) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

const std::vector<std::string>& treatment_names() {
    static const std::vector<std::string> names{"-N", "-P", "-K", "-B", "-S", "ctrl"};
    return names;
}

std::string synth_container_id(Domain domain, int cls, int container) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%c-k%d-c%02d", domain == Domain::source ? 'S' : 'T', cls,
                  container);
    return buf;
}

std::string synth_record_id(Domain domain, int cls, int container, int date, int view) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%c-k%d-c%02d-d%d-v%02d", domain == Domain::source ? 's' : 't',
                  cls, container, date, view);
    return buf;
}

struct ViewJitter {
    int dx = 0;
    int dy = 0;
    double brightness = 1.0;
};

ViewJitter draw_jitter(const SynthConfig& cfg, Rng& rng) {
    ViewJitter j;
    const int r = cfg.max_crop_offset;
    j.dx = static_cast<int>(rng.below(2 * r + 1)) - r;
    j.dy = static_cast<int>(rng.below(2 * r + 1)) - r;
    j.brightness = 1.0 + rng.uniform(-cfg.brightness_range, cfg.brightness_range);
    return j;
}

}  // namespace

std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain domain_from_string(std::string_view s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw DataError("unknown domain '" + std::string(s) + "'");
}

const ImageRecord* DatasetManifest::find(std::string_view id) const {
    auto it = std::lower_bound(records.begin(), records.end(), id,
                               [](const ImageRecord& r, std::string_view v) { return r.id < v; });
    return it != records.end() && it->id == id ? &*it : nullptr;
}

std::set<std::string> DatasetManifest::containers() const {
    std::set<std::string> out;
    for (const auto& r : records) out.insert(r.container_id);
    return out;
}

void SynthConfig::validate() const {
    if (class_count < 1 || containers_per_class_per_domain < 1 || dates < 1 ||
        views_per_container_per_date < 1)
        throw ConfigError("synthetic counts must be >= 1");
    if (image_size < 8) throw ConfigError("synthetic image_size must be >= 8");
    if (max_crop_offset < 0 || brightness_range < 0.0 || noise_sigma < 0.0 || hue_jitter < 0.0)
        throw ConfigError("synthetic jitter and noise parameters must be non-negative");
    if (near_duplicate_fraction < 0.0 || near_duplicate_fraction > 1.0)
        throw ConfigError("near_duplicate_fraction must be in [0, 1]");
}

void SynthConfig::disable_domain_shift() {
    color_matrix = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    color_bias = {0, 0, 0};
    noise_sigma = 0.0;
}

void validate_manifest(const DatasetManifest& manifest) {
    std::set<std::tuple<std::string, std::string, int>> keys;
    std::set<std::string> ids;
    for (const auto& r : manifest.records) {
        if (!ids.insert(r.id).second) throw DataError("duplicate record id '" + r.id + "'");
        if (!keys.emplace(r.container_id, r.capture_date, r.view_id).second)
            throw DataError("duplicate view key (" + r.container_id + ", " + r.capture_date +
                            ", view " + std::to_string(r.view_id) + ")");
        if (r.domain == Domain::source && !r.label)
            throw DataError("unlabeled source record '" + r.id + "'");
        if (r.label && (*r.label < 0 || *r.label >= manifest.class_count()))
            throw DataError("label out of range in record '" + r.id + "'");
    }
}

DatasetManifest parse_manifest(std::string_view text) {
    DatasetManifest m;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = ordered_json::parse(line);
            if (!have_header) {
                m.class_names = j.at("classes").get<std::vector<std::string>>();
                if (m.class_names.empty()) throw DataError("header declares no classes");
                have_header = true;
            } else {
                m.records.push_back(record_from_json(j));
            }
        } catch (const nlohmann::json::exception& e) {
            throw DataError("manifest parse error at line " + std::to_string(line_no) + ": " +
                            e.what());
        } catch (const DataError& e) {
            throw DataError("manifest error at line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_header) throw DataError("manifest parse error: missing header line");
    sort_records(m.records);
    validate_manifest(m);
    return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str());
}

std::string serialize_manifest(const DatasetManifest& manifest) {
    std::string out;
    ordered_json header;
    header["classes"] = manifest.class_names;
    out += header.dump() + "\n";
    for (const auto& r : manifest.records) out += record_to_json(r).dump() + "\n";
    return out;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write manifest " + path.string());
    out << serialize_manifest(manifest);
    if (!out) throw DataError("failed writing manifest " + path.string());
}

std::pair<DatasetManifest, DatasetManifest> split_by_container(const DatasetManifest& manifest,
                                                               const SplitSpec& spec) {
    if (spec.heldout_containers.empty()) throw ConfigError("heldout container set is empty");
    const auto known = manifest.containers();
    for (const auto& c : spec.heldout_containers)
        if (!known.contains(c)) throw ConfigError("unknown container id '" + c + "'");
    DatasetManifest train{{}, manifest.class_names};
    DatasetManifest test{{}, manifest.class_names};
    for (const auto& r : manifest.records)
        (spec.heldout_containers.contains(r.container_id) ? test : train).records.push_back(r);
    return {std::move(train), std::move(test)};
}

SplitSpec auto_holdout(const DatasetManifest& manifest) {
    std::map<std::pair<Domain, int>, std::set<std::string>> groups;
    for (const auto& r : manifest.records)
        if (r.label) groups[{r.domain, *r.label}].insert(r.container_id);
    SplitSpec spec;
    for (const auto& [key, containers] : groups) {
        const std::size_t take = (containers.size() + 3) / 4;
        auto it = containers.begin();
        for (std::size_t i = 0; i < take; ++i, ++it) spec.heldout_containers.insert(*it);
    }
    return spec;
}

DatasetManifest filter_domain(const DatasetManifest& manifest, Domain domain) {
    DatasetManifest out{{}, manifest.class_names};
    for (const auto& r : manifest.records)
        if (r.domain == domain) out.records.push_back(r);
    return out;
}

std::vector<UnlabeledRecord> strip_labels(const DatasetManifest& target_part) {
    std::vector<UnlabeledRecord> out;
    out.reserve(target_part.records.size());
    for (const auto& r : target_part.records) {
        if (r.domain != Domain::target)
            throw ConfigError("strip_labels expects target-domain records only");
        out.push_back({r.id, r.path, r.container_id, r.capture_date, r.view_id});
    }
    return out;
}

std::vector<ImageRecord> view_candidates(const ImageRecord& query, const DatasetManifest& manifest) {
    std::vector<ImageRecord> out;
    for (const auto& r : manifest.records)
        if (r.container_id == query.container_id && r.capture_date == query.capture_date &&
            r.domain == query.domain && r.view_id != query.view_id)
            out.push_back(r);
    std::sort(out.begin(), out.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.view_id < b.view_id; });
    return out;
}

Image render_synthetic(const SynthConfig& cfg, Domain domain, int cls, int container, int date,
                       int view) {
    constexpr double kPi = 3.14159265358979323846;
    const int S = cfg.image_size;

    // Container and date parameters are shared by both domains; only the view
    // jitter and the domain shift differ between a source and a target image.
    Rng container_rng(derive_seed(cfg.seed, "k" + std::to_string(cls) + "-c" + std::to_string(container)));
    // Stripe frequency (cycles per image) rises with the class index.
    const double freq_step = 5.0 / std::max(1, cfg.class_count - 1);
    const double freq = 2.0 + freq_step * (cls + container_rng.uniform(-0.15, 0.15));
    const double phase = 2.0 * kPi * container_rng.uniform01();
    const double theta = kPi * cls / std::max(1, cfg.class_count) +
                         (container_rng.uniform01() - 0.5) * (kPi / 18.0);
    const double hue = static_cast<double>(cls) / std::max(1, cfg.class_count) +
                       container_rng.uniform(-cfg.hue_jitter, cfg.hue_jitter);
    auto color = hsv_to_rgb(hue - std::floor(hue), 0.65, 0.85);
    for (double& c : color) c = std::clamp(c + container_rng.uniform(-0.05, 0.05), 0.0, 1.0);

    Rng date_rng(derive_seed(cfg.seed, "k" + std::to_string(cls) + "-c" + std::to_string(container) +
                                           "-d" + std::to_string(date)));
    const double date_phase = 0.5 * kPi * date_rng.uniform01();

    const int dup_count = static_cast<int>(
        std::lround(cfg.near_duplicate_fraction * cfg.views_per_container_per_date));
    const bool near_duplicate = view > 0 && view >= cfg.views_per_container_per_date - dup_count;
    const std::string id = synth_record_id(domain, cls, container, date, view);
    ViewJitter jitter;
    if (near_duplicate) {
        Rng anchor(derive_seed(cfg.seed, synth_record_id(domain, cls, container, date, 0)));
        jitter = draw_jitter(cfg, anchor);
        Rng own(derive_seed(cfg.seed, id));
        jitter.brightness += own.uniform(-0.01, 0.01);
    } else {
        Rng own(derive_seed(cfg.seed, id));
        jitter = draw_jitter(cfg, own);
    }

    Image img(S, S);
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
            const double u = x + jitter.dx;
            const double v = y + jitter.dy;
            const double s =
                0.5 + 0.5 * std::sin(2.0 * kPi * freq * (u * ct + v * st) / S + phase + date_phase);
            for (int c = 0; c < 3; ++c)
                img.at(y, x, c) = std::clamp(color[c] * (0.3 + 0.7 * s) * jitter.brightness, 0.0, 1.0);
        }
    }

    if (domain == Domain::target) {
        Rng noise_rng(derive_seed(cfg.seed, id + "/noise"));
        const auto& M = cfg.color_matrix;
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                const double r = img.at(y, x, 0);
                const double g = img.at(y, x, 1);
                const double b = img.at(y, x, 2);
                for (int c = 0; c < 3; ++c) {
                    double out = M[3 * c] * r + M[3 * c + 1] * g + M[3 * c + 2] * b + cfg.color_bias[c];
                    if (cfg.noise_sigma > 0.0) out += cfg.noise_sigma * noise_rng.normal();
                    img.at(y, x, c) = std::clamp(out, 0.0, 1.0);
                }
            }
        }
    }
    return img;
}

DatasetManifest generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    if (ec) throw DataError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    const auto& names = treatment_names();
    for (int k = 0; k < cfg.class_count; ++k)
        m.class_names.push_back(k < static_cast<int>(names.size()) ? names[k]
                                                                   : "class" + std::to_string(k));

    for (Domain domain : {Domain::source, Domain::target}) {
        for (int k = 0; k < cfg.class_count; ++k) {
            for (int c = 0; c < cfg.containers_per_class_per_domain; ++c) {
                for (int d = 0; d < cfg.dates; ++d) {
                    for (int v = 0; v < cfg.views_per_container_per_date; ++v) {
                        ImageRecord r;
                        r.id = synth_record_id(domain, k, c, d, v);
                        r.path = "images/" + r.id + ".png";
                        r.domain = domain;
                        r.genotype = domain == Domain::source ? "genotype-s" : "genotype-t";
                        r.container_id = synth_container_id(domain, k, c);
                        r.capture_date = date_plus_days("2022-06-21", 7 * d);
                        r.view_id = v;
                        r.label = k;
                        write_png(out_dir / r.path, render_synthetic(cfg, domain, k, c, d, v));
                        m.records.push_back(std::move(r));
                    }
                }
            }
        }
    }
    sort_records(m.records);
    save_manifest(m, out_dir / "manifest.jsonl");
    return m;
}

}  // namespace mvmatch
