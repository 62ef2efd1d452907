#include "mvmatch/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "mvmatch/error.hpp"

namespace mvmatch {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Settings = std::map<std::string, std::string>;

std::string hex(const unsigned char* digest, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        s += digits[digest[i] >> 4];
        s += digits[digest[i] & 15];
    }
    return s;
}

class Sha1 {
public:
    Sha1() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha1(), nullptr) != 1) throw DataError("sha1 init failed");
    }
    ~Sha1() { EVP_MD_CTX_free(ctx_); }
    Sha1(const Sha1&) = delete;
    Sha1& operator=(const Sha1&) = delete;

    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_, data, n) != 1) throw DataError("sha1 update failed");
    }
    std::string hex_digest() {
        unsigned char digest[EVP_MAX_MD_SIZE];
        unsigned int n = 0;
        if (EVP_DigestFinal_ex(ctx_, digest, &n) != 1) throw DataError("sha1 final failed");
        return hex(digest, n);
    }

private:
    EVP_MD_CTX* ctx_;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

std::string fmt(double v, const char* spec = "%.17g") {
    char buf[40];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        std::string piece(s.substr(start, pos == std::string_view::npos ? s.npos : pos - start));
        piece.erase(0, piece.find_first_not_of(" \t"));
        piece.erase(piece.find_last_not_of(" \t") + 1);
        if (!piece.empty()) out.push_back(std::move(piece));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

std::pair<std::string, std::string> split_assignment(std::string_view s) {
    const auto eq = s.find('=');
    if (eq == std::string_view::npos || eq == 0) throw ConfigError("expected key=value, got '" + std::string(s) + "'");
    return {std::string(s.substr(0, eq)), std::string(s.substr(eq + 1))};
}

// --config accepts a flat key = value file or a run.json written by a previous run.
Settings load_settings(const fs::path& path, std::string_view command) {
    const std::string text = read_file(path);
    Settings s;
    if (path.extension() == ".json") {
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw ConfigError("cannot parse " + path.string() + ": " + e.what());
        }
        if (j.value("command", std::string(command)) != command)
            throw ConfigError(path.string() + " was written by '" + j.value("command", "") + "', not '" +
                              std::string(command) + "'");
        if (!j.contains("settings") || !j["settings"].is_object())
            throw ConfigError(path.string() + " has no settings object");
        for (const auto& [k, v] : j["settings"].items())
            s[k] = v.is_string() ? v.get<std::string>() : v.dump();
        return s;
    }
    for (auto& [k, v] : parse_key_values(text)) s[k] = v;
    return s;
}

std::string take(Settings& s, const std::string& key, std::string fallback = {}) {
    auto it = s.find(key);
    if (it == s.end()) return fallback;
    std::string v = it->second;
    s.erase(it);
    return v;
}

long long to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long i = std::stoll(v, &used);
        if (used == v.size()) return i;
    } catch (const std::exception&) {
    }
    throw ConfigError("invalid integer for " + key + ": '" + v + "'");
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("invalid number for " + key + ": '" + v + "'");
}

void reject_leftovers(const Settings& s) {
    if (!s.empty()) throw ConfigError("unknown setting '" + s.begin()->first + "'");
}

void prepare_out_dir(const fs::path& dir, bool force) {
    if (dir.empty()) throw ConfigError("--out is required");
    const fs::path parent = fs::absolute(dir).parent_path();
    if (!fs::is_directory(parent)) throw DataError("parent directory " + parent.string() + " does not exist");
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw ConfigError("output directory " + dir.string() + " is not empty (use --force)");
    fs::create_directories(dir);
}

std::string run_json(std::string_view command, const Settings& settings, const json& extra) {
    json j;
    j["command"] = command;
    json s = json::object();
    for (const auto& [k, v] : settings) s[k] = v;
    j["settings"] = std::move(s);
    for (const auto& [k, v] : extra.items()) j[k] = v;
    return j.dump(2) + "\n";
}

// Consumes TrainConfig keys from s and returns the remaining settings untouched.
// loss_preset is applied first so individual loss keys can refine it.
TrainConfig train_config_from(Settings& s) {
    TrainConfig c;
    c.epochs = 10;
    if (auto preset = take(s, "loss_preset"); !preset.empty()) c.set("loss_preset", preset);
    for (auto it = s.begin(); it != s.end();) {
        if (c.set(it->first, it->second))
            it = s.erase(it);
        else
            ++it;
    }
    c.validate();
    return c;
}

Settings echo_config(const TrainConfig& c) {
    Settings s;
    for (auto& [k, v] : c.to_key_values()) s[k] = v;
    return s;
}

struct GlobalFlags {
    std::string config;
    std::string out;
    bool force = false;
};

// Flag values land in the overrides map under their setting key.
CLI::Option* flag_setting(CLI::App* app, Settings& overrides, const std::string& flag, const std::string& key,
                          const std::string& help) {
    return app->add_option_function<std::string>(flag, [&overrides, key](const std::string& v) { overrides[key] = v; },
                                                 help);
}

void add_set_option(CLI::App* app, Settings& overrides) {
    app->add_option_function<std::vector<std::string>>(
        "--set",
        [&overrides](const std::vector<std::string>& kvs) {
            for (const auto& kv : kvs) {
                auto [k, v] = split_assignment(kv);
                overrides[k] = v;
            }
        },
        "Override any setting as key=value");
}

Settings merged(const GlobalFlags& g, std::string_view command, const Settings& overrides) {
    Settings s = g.config.empty() ? Settings{} : load_settings(g.config, command);
    for (const auto& [k, v] : overrides) s[k] = v;
    return s;
}

std::string counts_table(const DatasetManifest& m) {
    std::map<std::pair<std::string, int>, int> counts;
    for (const auto& r : m.records) ++counts[{std::string(to_string(r.domain)), r.label.value_or(-1)}];
    std::ostringstream os;
    os << "domain  class  count\n";
    for (const auto& [key, n] : counts) {
        const std::string name = key.second >= 0 ? m.class_names.at(static_cast<std::size_t>(key.second)) : "?";
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-7s %-6s %d\n", key.first.c_str(), name.c_str(), n);
        os << buf;
    }
    return os.str();
}

int cmd_gen_data(const GlobalFlags& g, const Settings& overrides, std::ostream& out) {
    Settings s = merged(g, "gen-data", overrides);
    const Settings echo = s;
    SynthConfig c;
    if (auto v = take(s, "classes"); !v.empty()) c.class_count = static_cast<int>(to_int("classes", v));
    if (auto v = take(s, "containers"); !v.empty()) c.containers_per_class_per_domain = static_cast<int>(to_int("containers", v));
    if (auto v = take(s, "dates"); !v.empty()) c.dates = static_cast<int>(to_int("dates", v));
    if (auto v = take(s, "views"); !v.empty()) c.views_per_container_per_date = static_cast<int>(to_int("views", v));
    if (auto v = take(s, "size"); !v.empty()) c.image_size = static_cast<int>(to_int("size", v));
    if (auto v = take(s, "noise"); !v.empty()) c.noise_sigma = to_double("noise", v);
    if (auto v = take(s, "hue_jitter"); !v.empty()) c.hue_jitter = to_double("hue_jitter", v);
    if (auto v = take(s, "brightness_range"); !v.empty()) c.brightness_range = to_double("brightness_range", v);
    if (auto v = take(s, "near_duplicates"); !v.empty()) c.near_duplicate_fraction = to_double("near_duplicates", v);
    if (auto v = take(s, "seed"); !v.empty()) c.seed = static_cast<std::uint64_t>(to_int("seed", v));
    if (auto v = take(s, "color_matrix"); !v.empty()) {
        const auto parts = split(v, ',');
        if (parts.size() != 9) throw ConfigError("color_matrix needs nine comma-separated values");
        for (std::size_t i = 0; i < 9; ++i) c.color_matrix[i] = to_double("color_matrix", parts[i]);
    }
    if (auto v = take(s, "color_bias"); !v.empty()) {
        const auto parts = split(v, ',');
        if (parts.size() != 3) throw ConfigError("color_bias needs three comma-separated values");
        for (std::size_t i = 0; i < 3; ++i) c.color_bias[i] = to_double("color_bias", parts[i]);
    }
    if (auto v = take(s, "shift", "on"); v == "off") c.disable_domain_shift();
    else if (v != "on") throw ConfigError("shift must be on or off");
    reject_leftovers(s);
    c.validate();

    const fs::path dir = g.out;
    prepare_out_dir(dir, g.force);
    const DatasetManifest m = generate_synthetic(c, dir);
    const std::string hash = dataset_hash(dir / "manifest.jsonl");
    write_file(dir / "run.json", run_json("gen-data", echo, json{{"dataset_sha1", hash}}));
    out << counts_table(m);
    out << "records " << m.records.size() << "\n";
    out << "dataset sha1 " << hash << "\n";
    return kExitOk;
}

int cmd_mine_views(const GlobalFlags& g, const Settings& overrides, bool verify, std::ostream& out) {
    Settings s = merged(g, "mine-views", overrides);
    const Settings echo = s;
    const fs::path manifest_path = take(s, "manifest");
    if (manifest_path.empty()) throw ConfigError("--manifest is required");
    MiningOptions opt;
    opt.n = static_cast<int>(to_int("n", take(s, "n", std::to_string(kDefaultViewCount))));
    opt.method = mining_method_from_string(take(s, "method", "sgvm"));
    opt.seed = static_cast<std::uint64_t>(to_int("seed", take(s, "seed", "0")));
    opt.threads = static_cast<unsigned>(to_int("threads", take(s, "threads", "0")));
    const int bins = static_cast<int>(to_int("bins", take(s, "bins", std::to_string(kDefaultNmiBins))));
    const int side = static_cast<int>(to_int("side", take(s, "side", std::to_string(kDefaultNmiSide))));
    reject_leftovers(s);
    if (opt.n < 1) throw ConfigError("n must be >= 1");

    const DatasetManifest m = load_manifest(manifest_path);
    ImageStore store(fs::absolute(manifest_path).parent_path());
    NmiScorer scorer(store, bins, side);
    const auto sets = mine_views(m, opt, scorer);

    prepare_out_dir(g.out, g.force);
    save_view_sets(sets, fs::path(g.out) / "views.jsonl");
    write_file(fs::path(g.out) / "run.json",
               run_json("mine-views", echo, json{{"manifest_sha1", git_blob_sha1(read_file(manifest_path))}}));

    std::size_t max_views = 0, empty = 0;
    for (const auto& [id, vs] : sets) {
        max_views = std::max(max_views, vs.members.size());
        if (vs.members.empty()) ++empty;
    }
    out << "mined " << sets.size() << " view sets (" << to_string(opt.method) << ", n=" << opt.n
        << "), max size " << max_views << ", empty " << empty << "\n";

    if (verify) {
        // Recompute a sample of queries by scoring every candidate and sorting.
        std::vector<const ImageRecord*> sample;
        for (const auto& r : m.records) sample.push_back(&r);
        Rng rng(derive_seed(opt.seed, "verify"));
        for (std::size_t i = 0; i < sample.size() && i < 100; ++i)
            std::swap(sample[i], sample[i + rng.below(sample.size() - i)]);
        sample.resize(std::min<std::size_t>(sample.size(), 100));
        std::size_t mismatches = 0;
        for (const ImageRecord* q : sample) {
            const auto cands = view_candidates(*q, m);
            ViewSet expected;
            if (opt.method == MiningMethod::sgvm) {
                std::vector<std::pair<double, const ImageRecord*>> scored;
                for (const auto& c : cands) scored.emplace_back(nmi(store.get(q->id, q->path), store.get(c.id, c.path), bins, side), &c);
                std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                    return a.first != b.first ? a.first < b.first : a.second->view_id < b.second->view_id;
                });
                expected.query_id = q->id;
                for (std::size_t k = 0; k < scored.size() && k < static_cast<std::size_t>(opt.n); ++k)
                    expected.members.push_back({scored[k].second->id, scored[k].second->view_id, scored[k].first});
            } else {
                Rng qrng(derive_seed(opt.seed, q->id));
                expected = random_select(*q, cands, opt.n, qrng);
            }
            if (sets.at(q->id).member_ids() != expected.member_ids()) ++mismatches;
        }
        out << "verify: " << sample.size() - mismatches << "/" << sample.size() << " queries match brute force\n";
        if (mismatches) throw DataError("view set verification failed on " + std::to_string(mismatches) + " queries");
    }
    return kExitOk;
}

std::string epoch_line(const EpochMetrics& e, int epochs) {
    std::ostringstream os;
    os << "epoch " << e.epoch << "/" << epochs << " lr " << fmt(e.lr_last, "%.4e") << " loss " << fmt(e.mean_total, "%.4f");
    for (std::size_t t = 0; t < kTermCount; ++t)
        if (e.mean_terms[t] != 0.0 || e.masked_fraction[t] != 0.0)
            os << " " << to_string(static_cast<Term>(t)) << " " << fmt(e.mean_terms[t], "%.4f");
    if (e.target_top1) os << " target_top1 " << fmt(*e.target_top1, "%.4f");
    return os.str();
}

int cmd_train(const GlobalFlags& g, const Settings& overrides, std::ostream& out) {
    Settings s = merged(g, "train", overrides);
    const fs::path manifest_path = take(s, "manifest");
    if (manifest_path.empty()) throw ConfigError("--manifest is required");
    const std::string views_path = take(s, "views");
    const std::string holdout = take(s, "holdout", "auto");
    const unsigned threads = static_cast<unsigned>(to_int("threads", take(s, "threads", "0")));
    const TrainConfig config = train_config_from(s);
    reject_leftovers(s);

    auto ex = load_experiment(manifest_path, holdout);
    prepare_out_dir(g.out, g.force);

    std::map<std::string, ViewSet> sets;
    if (!views_path.empty()) {
        sets = load_view_sets(views_path, ex->manifest);
    } else {
        NmiScorer scorer(*ex->images, config.nmi_bins, config.nmi_side);
        sets = mine_for_config(*ex, config, scorer, threads);
    }

    TrainResult result = run_experiment(*ex, config, sets, [&](const EpochMetrics& e) {
        out << epoch_line(e, config.epochs) << "\n" << std::flush;
    });

    Settings echo = echo_config(config);
    echo["manifest"] = fs::absolute(manifest_path).string();
    echo["holdout"] = holdout;
    if (!views_path.empty()) echo["views"] = fs::absolute(views_path).string();
    json holdout_list = json::array();
    for (const auto& c : ex->holdout.heldout_containers) holdout_list.push_back(c);
    const json extra{{"seed", config.seed},
                     {"manifest_sha1", git_blob_sha1(read_file(manifest_path))},
                     {"heldout_containers", holdout_list},
                     {"class_names", ex->manifest.class_names},
                     {"total_steps", result.report.total_steps},
                     {"self_view_fallbacks", result.report.self_view_fallbacks},
                     {"final_target_top1", result.report.epochs.back().target_top1.value_or(0.0)}};
    const std::string run = run_json("train", echo, extra);

    const fs::path dir = g.out;
    save_checkpoint(result.params, run, dir / "model.ckpt");
    write_file(dir / "metrics.csv", metrics_csv(result.report));
    write_file(dir / "steps.csv", steps_csv(result.report));
    write_file(dir / "run.json", run);
    out << "wrote " << (dir / "model.ckpt").string() << "\n";
    return kExitOk;
}

int cmd_eval(const GlobalFlags& g, const Settings& overrides, std::ostream& out) {
    Settings s = merged(g, "eval", overrides);
    const Settings echo = s;
    const fs::path ckpt = take(s, "checkpoint");
    if (ckpt.empty()) throw ConfigError("--checkpoint is required");
    std::string provenance;
    const ModelParams params = load_checkpoint(ckpt, &provenance);
    Settings trained;
    try {
        const json p = json::parse(provenance);
        if (p.contains("settings"))
            for (const auto& [k, v] : p["settings"].items()) trained[k] = v.get<std::string>();
    } catch (const json::exception&) {
        // Checkpoints without readable provenance rely on explicit flags.
    }
    auto pick = [&](const std::string& key, const std::string& fallback) {
        std::string v = take(s, key);
        if (!v.empty()) return v;
        auto it = trained.find(key);
        return it != trained.end() ? it->second : fallback;
    };
    const std::string manifest_path = pick("manifest", "");
    if (manifest_path.empty()) throw ConfigError("--manifest is required");
    const std::string holdout = pick("holdout", "auto");
    const std::string split_name = take(s, "split", "test");
    const std::string domain_name = take(s, "domain", "target");
    TrainConfig norm_holder;
    norm_holder.set("norm_mean", pick("norm_mean", "0.485,0.456,0.406"));
    norm_holder.set("norm_std", pick("norm_std", "0.229,0.224,0.225"));
    reject_leftovers(s);
    if (split_name != "train" && split_name != "test") throw ConfigError("split must be train or test");
    const Domain domain = domain_from_string(domain_name);

    auto ex = load_experiment(manifest_path, holdout);
    if (ex->manifest.class_count() != params.classes)
        throw DataError("checkpoint has " + std::to_string(params.classes) + " classes but manifest has " +
                        std::to_string(ex->manifest.class_count()));
    const auto [train_part, test_part] = split_by_container(ex->manifest, ex->holdout);
    const DatasetManifest part = filter_domain(split_name == "test" ? test_part : train_part, domain);
    const EvalReport report = evaluate(params, part, *ex->images, norm_holder.norm);

    const fs::path dir = g.out.empty() ? ckpt.parent_path() / ("eval-" + domain_name + "-" + split_name) : fs::path(g.out);
    prepare_out_dir(dir, g.force || g.out.empty());
    write_report(report, ex->manifest.class_names, dir);
    write_file(dir / "run.json", run_json("eval", echo, json{{"top1", report.top1}, {"n", report.n}}));
    out << domain_name << " " << split_name << " top1 " << fmt(report.top1, "%.6f") << " macro " << fmt(report.macro_avg, "%.6f")
        << " n " << report.n << "\n";
    return kExitOk;
}

struct Axis {
    std::string key;
    std::vector<std::string> values;
};

std::vector<Axis> parse_axes(const std::string& spec) {
    std::vector<Axis> axes;
    for (const auto& part : split(spec, ';')) {
        auto [k, v] = split_assignment(part);
        Axis a{k, split(v, ',')};
        if (a.values.empty()) throw ConfigError("axis '" + k + "' has no values");
        axes.push_back(std::move(a));
    }
    return axes;
}

int cmd_ablate(const GlobalFlags& g, const Settings& overrides, std::ostream& out) {
    Settings s = merged(g, "ablate", overrides);
    const Settings echo = s;
    const fs::path manifest_path = take(s, "manifest");
    if (manifest_path.empty()) throw ConfigError("--manifest is required");
    const std::string holdout = take(s, "holdout", "auto");
    const auto axes = parse_axes(take(s, "axes"));
    if (axes.empty()) throw ConfigError("at least one --axis is required");
    std::vector<std::uint64_t> seeds;
    for (const auto& v : split(take(s, "seeds", take(s, "seed", "0")), ','))
        seeds.push_back(static_cast<std::uint64_t>(to_int("seeds", v)));
    const unsigned parallel = static_cast<unsigned>(std::max<long long>(1, to_int("parallel", take(s, "parallel", "1"))));
    Settings base = s;
    {
        Settings probe = base;
        train_config_from(probe);
        reject_leftovers(probe);
    }

    std::vector<std::vector<std::string>> cells{{}};
    for (const auto& a : axes) {
        std::vector<std::vector<std::string>> next;
        for (const auto& cell : cells)
            for (const auto& v : a.values) {
                auto c = cell;
                c.push_back(v);
                next.push_back(std::move(c));
            }
        cells = std::move(next);
    }
    // Validate every cell before any training starts.
    std::vector<std::vector<TrainConfig>> configs(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (auto seed : seeds) {
            Settings cs = base;
            for (std::size_t k = 0; k < axes.size(); ++k) cs[axes[k].key] = cells[i][k];
            cs["seed"] = std::to_string(seed);
            configs[i].push_back(train_config_from(cs));
            reject_leftovers(cs);
        }
    }

    auto ex = load_experiment(manifest_path, holdout);
    prepare_out_dir(g.out, g.force);
    const fs::path dir = g.out;
    write_file(dir / "run.json", run_json("ablate", echo, json::object()));

    NmiScorer scorer(*ex->images, configs[0][0].nmi_bins, configs[0][0].nmi_side);
    std::mutex mining_mutex;
    std::map<std::tuple<int, int, std::uint64_t, int, int>, std::map<std::string, ViewSet>> mined;
    auto views_for = [&](const TrainConfig& c) -> const std::map<std::string, ViewSet>& {
        const std::uint64_t key_seed = c.mining == MiningMethod::random ? c.seed : 0;
        const auto key = std::make_tuple(static_cast<int>(c.mining), c.n_views, key_seed, c.nmi_bins, c.nmi_side);
        std::lock_guard lock(mining_mutex);
        auto it = mined.find(key);
        if (it == mined.end()) {
            NmiScorer local(*ex->images, c.nmi_bins, c.nmi_side);
            NmiScorer& use = (c.nmi_bins == scorer.bins() && c.nmi_side == scorer.side()) ? scorer : local;
            it = mined.emplace(key, mine_for_config(*ex, c, use, 1)).first;
        }
        return it->second;
    };

    std::vector<std::optional<std::vector<double>>> results(cells.size());
    std::mutex results_mutex;
    auto header = [&] {
        std::string h;
        for (const auto& a : axes) h += a.key + ",";
        for (auto seed : seeds) h += "top1_seed" + std::to_string(seed) + ",";
        return h + "mean_top1,std_top1\n";
    }();
    auto persist = [&] {
        std::string csv = header;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (!results[i]) continue;
            for (const auto& v : cells[i]) csv += v + ",";
            const auto& acc = *results[i];
            double mean = 0.0, var = 0.0;
            for (double a : acc) mean += a;
            mean /= static_cast<double>(acc.size());
            for (double a : acc) var += (a - mean) * (a - mean);
            const double sd = acc.size() > 1 ? std::sqrt(var / static_cast<double>(acc.size() - 1)) : 0.0;
            for (double a : acc) csv += fmt(a, "%.6f") + ",";
            csv += fmt(mean, "%.6f") + "," + fmt(sd, "%.6f") + "\n";
        }
        write_file(dir / "results.csv", csv);
    };

    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    auto worker = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) return;
            try {
                std::vector<double> acc;
                for (const auto& c : configs[i]) {
                    const TrainResult r = run_experiment(*ex, c, views_for(c));
                    acc.push_back(r.report.epochs.back().target_top1.value_or(0.0));
                }
                std::lock_guard lock(results_mutex);
                results[i] = acc;
                persist();
                std::string label;
                for (std::size_t k = 0; k < axes.size(); ++k) label += (k ? " " : "") + axes[k].key + "=" + cells[i][k];
                double mean = 0.0;
                for (double a : acc) mean += a;
                out << "cell " << i + 1 << "/" << cells.size() << " " << label << " mean_top1 "
                    << fmt(mean / static_cast<double>(acc.size()), "%.4f") << "\n"
                    << std::flush;
            } catch (...) {
                std::lock_guard lock(results_mutex);
                if (!failure) failure = std::current_exception();
                next = cells.size();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < std::min<std::size_t>(parallel, cells.size()); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    out << "wrote " << (dir / "results.csv").string() << "\n";
    return kExitOk;
}

}  // namespace

std::string git_blob_sha1(std::string_view bytes) {
    Sha1 sha;
    const std::string header = "blob " + std::to_string(bytes.size());
    sha.update(header.data(), header.size() + 1);  // includes the NUL
    sha.update(bytes.data(), bytes.size());
    return sha.hex_digest();
}

std::string dataset_hash(const fs::path& manifest_path) {
    const std::string manifest_bytes = read_file(manifest_path);
    const DatasetManifest m = parse_manifest(manifest_bytes);
    const fs::path root = fs::absolute(manifest_path).parent_path();
    Sha1 sha;
    sha.update(manifest_bytes.data(), manifest_bytes.size());
    for (const auto& r : m.records) {
        const std::string bytes = read_file(root / r.path);
        sha.update(bytes.data(), bytes.size());
    }
    return sha.hex_digest();
}

SplitSpec parse_holdout(const DatasetManifest& manifest, std::string_view holdout) {
    if (holdout.empty() || holdout == "auto") return auto_holdout(manifest);
    SplitSpec spec;
    for (auto& c : split(holdout, ',')) spec.heldout_containers.insert(std::move(c));
    return spec;
}

std::unique_ptr<Experiment> load_experiment(const fs::path& manifest_path, std::string_view holdout) {
    auto ex = std::make_unique<Experiment>();
    ex->manifest_path = fs::absolute(manifest_path);
    ex->manifest = load_manifest(manifest_path);
    ex->holdout = parse_holdout(ex->manifest, holdout);
    auto [train_part, test_part] = split_by_container(ex->manifest, ex->holdout);
    ex->source_train = filter_domain(train_part, Domain::source);
    ex->target_train = strip_labels(filter_domain(train_part, Domain::target));
    ex->source_test = filter_domain(test_part, Domain::source);
    ex->target_test = filter_domain(test_part, Domain::target);
    ex->images = std::make_unique<ImageStore>(ex->manifest_path.parent_path());
    return ex;
}

std::map<std::string, ViewSet> mine_for_config(const Experiment& ex, const TrainConfig& config, NmiScorer& scorer,
                                               unsigned threads) {
    MiningOptions opt;
    opt.n = config.n_views;
    opt.method = config.mining;
    opt.seed = derive_seed(config.seed, "mining");
    opt.threads = threads;
    return mine_views(ex.manifest, opt, scorer);
}

TrainResult run_experiment(const Experiment& ex, const TrainConfig& config,
                           const std::map<std::string, ViewSet>& view_sets,
                           const std::function<void(const EpochMetrics&)>& on_epoch) {
    TrainData data{&ex.source_train, &ex.target_train, &view_sets, ex.images.get()};
    const bool has_test = !ex.target_test.records.empty();
    return train(config, data, [&](const ModelParams& params, EpochMetrics& em) {
        if (has_test) em.target_top1 = evaluate(params, ex.target_test, *ex.images, config.norm).top1;
        if (on_epoch) on_epoch(em);
    });
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"mvmatch: multi-view consistency domain adaptation on container image datasets"};
    app.require_subcommand(1);
    GlobalFlags g;
    auto add_globals = [&](CLI::App* sub) {
        sub->add_option("--config", g.config, "Settings file (key = value) or a previous run.json");
        sub->add_option("--out", g.out, "Output directory");
        sub->add_flag("--force", g.force, "Allow writing into a non-empty output directory");
    };
    Settings ov;

    auto* gen = app.add_subcommand("gen-data", "Render the synthetic two-domain dataset");
    add_globals(gen);
    flag_setting(gen, ov, "--seed", "seed", "Generator seed");
    flag_setting(gen, ov, "--classes", "classes", "Number of treatments");
    flag_setting(gen, ov, "--containers", "containers", "Containers per class and domain");
    flag_setting(gen, ov, "--dates", "dates", "Capture dates per container");
    flag_setting(gen, ov, "--views", "views", "Views per container and date");
    flag_setting(gen, ov, "--size", "size", "Image side in pixels");
    flag_setting(gen, ov, "--noise", "noise", "Target noise sigma");
    flag_setting(gen, ov, "--near-duplicates", "near_duplicates", "Fraction of near-duplicate views");
    flag_setting(gen, ov, "--shift", "shift", "Target color shift: on|off");
    add_set_option(gen, ov);

    bool verify = false;
    auto* mine = app.add_subcommand("mine-views", "Mine per-record view sets");
    add_globals(mine);
    flag_setting(mine, ov, "--seed", "seed", "Seed for random mining");
    flag_setting(mine, ov, "--manifest", "manifest", "Dataset manifest");
    flag_setting(mine, ov, "--n", "n", "Views per query");
    flag_setting(mine, ov, "--method", "method", "sgvm|random");
    flag_setting(mine, ov, "--bins", "bins", "NMI histogram bins");
    flag_setting(mine, ov, "--side", "side", "NMI working resolution");
    flag_setting(mine, ov, "--threads", "threads", "Worker threads (0 = all cores)");
    mine->add_flag("--verify", verify, "Cross-check 100 queries against brute-force selection");
    add_set_option(mine, ov);

    auto* tr = app.add_subcommand("train", "Train a model");
    add_globals(tr);
    flag_setting(tr, ov, "--seed", "seed", "Training seed");
    flag_setting(tr, ov, "--manifest", "manifest", "Dataset manifest");
    flag_setting(tr, ov, "--views", "views", "View-set file from mine-views (mined on the fly if absent)");
    flag_setting(tr, ov, "--holdout", "holdout", "Test containers: auto or a comma list");
    flag_setting(tr, ov, "--loss-preset", "loss_preset",
                 "source-only|fixmatch|mv-match-hard|mv-match-soft|wa2-only");
    flag_setting(tr, ov, "--epochs", "epochs", "Epochs");
    flag_setting(tr, ov, "--tau", "tau", "Pseudo-label confidence threshold");
    flag_setting(tr, ov, "--mining", "mining", "sgvm|random");
    flag_setting(tr, ov, "--n-views", "n_views", "Views per query");
    flag_setting(tr, ov, "--threads", "threads", "Mining threads (0 = all cores)");
    add_set_option(tr, ov);

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    add_globals(ev);
    flag_setting(ev, ov, "--checkpoint", "checkpoint", "Checkpoint file");
    flag_setting(ev, ov, "--manifest", "manifest", "Dataset manifest (default: from checkpoint)");
    flag_setting(ev, ov, "--holdout", "holdout", "Test containers (default: from checkpoint)");
    flag_setting(ev, ov, "--split", "split", "train|test");
    flag_setting(ev, ov, "--domain", "domain", "source|target");
    add_set_option(ev, ov);

    auto* ab = app.add_subcommand("ablate", "Sweep train+eval over a grid of settings");
    add_globals(ab);
    flag_setting(ab, ov, "--seed", "seed", "Single seed (ignored when --seeds is given)");
    flag_setting(ab, ov, "--seeds", "seeds", "Comma-separated seeds averaged per cell");
    flag_setting(ab, ov, "--manifest", "manifest", "Dataset manifest");
    flag_setting(ab, ov, "--holdout", "holdout", "Test containers: auto or a comma list");
    flag_setting(ab, ov, "--parallel", "parallel", "Cells trained concurrently");
    ab->add_option_function<std::vector<std::string>>(
        "--axis",
        [&ov](const std::vector<std::string>& axes) {
            for (const auto& a : axes) ov["axes"] += (ov["axes"].empty() ? "" : ";") + a;
        },
        "Sweep axis key=v1,v2,...; repeat for a cartesian product");
    add_set_option(ab, ov);

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    try {
        if (gen->parsed()) return cmd_gen_data(g, ov, out);
        if (mine->parsed()) return cmd_mine_views(g, ov, verify, out);
        if (tr->parsed()) return cmd_train(g, ov, out);
        if (ev->parsed()) return cmd_eval(g, ov, out);
        if (ab->parsed()) return cmd_ablate(g, ov, out);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}

}  // namespace mvmatch
