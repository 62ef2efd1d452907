#include <doctest.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mvmatch/cli.hpp"
#include "mvmatch/manifest.hpp"
#include "support.hpp"

using namespace mvmatch;
namespace fs = std::filesystem;

namespace {

struct CliRun {
    int code = 0;
    std::string out;
    std::string err;
};

CliRun cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    CliRun r;
    r.code = run_cli(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream in(line);
    for (std::string cell; std::getline(in, cell, ',');) out.push_back(cell);
    return out;
}

const std::vector<std::string> kSmallData{"--classes", "2", "--containers", "4", "--dates", "1",
                                          "--views",   "4", "--size",       "16"};

// One small dataset shared by the tests below.
const fs::path& dataset() {
    static const fs::path dir = [] {
        const auto root = mvtest::scratch_dir("cli_shared");
        auto args = std::vector<std::string>{"gen-data", "--out", (root / "data").string()};
        args.insert(args.end(), kSmallData.begin(), kSmallData.end());
        REQUIRE(cli(args).code == 0);
        return root;
    }();
    return dir;
}

std::string manifest_path() { return (dataset() / "data" / "manifest.jsonl").string(); }

}  // namespace

TEST_CASE("gen-data counts and reproducible hash") {
    const auto root = mvtest::scratch_dir("cli_gen");
    std::vector<std::string> hashes;
    for (const char* name : {"a", "b"}) {
        auto args = std::vector<std::string>{"gen-data", "--out", (root / name).string(), "--seed", "7"};
        args.insert(args.end(), kSmallData.begin(), kSmallData.end());
        const auto r = cli(args);
        REQUIRE(r.code == 0);
        // 2 domains x 2 classes x 4 containers x 1 date x 4 views
        CHECK(r.out.find("records 64") != std::string::npos);
        const auto pos = r.out.find("dataset sha1 ");
        REQUIRE(pos != std::string::npos);
        hashes.push_back(r.out.substr(pos + 13, 40));
        CHECK(dataset_hash(root / name / "manifest.jsonl") == hashes.back());
        CHECK(load_manifest(root / name / "manifest.jsonl").records.size() == 64);
        CHECK(fs::exists(root / name / "run.json"));
    }
    CHECK(hashes[0] == hashes[1]);

    auto other = std::vector<std::string>{"gen-data", "--out", (root / "c").string(), "--seed", "8"};
    other.insert(other.end(), kSmallData.begin(), kSmallData.end());
    REQUIRE(cli(other).code == 0);
    CHECK(dataset_hash(root / "c" / "manifest.jsonl") != hashes[0]);

    const auto missing = cli({"gen-data", "--out", (root / "no" / "such" / "dir").string()});
    CHECK(missing.code != 0);
    CHECK(!missing.err.empty());

    // Refuses a non-empty directory unless forced.
    auto again = std::vector<std::string>{"gen-data", "--out", (root / "a").string()};
    again.insert(again.end(), kSmallData.begin(), kSmallData.end());
    CHECK(cli(again).code == 1);
    again.push_back("--force");
    CHECK(cli(again).code == 0);
}

TEST_CASE("git blob hash matches git") {
    CHECK(git_blob_sha1("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
    CHECK(git_blob_sha1("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST_CASE("mine-views cardinality, verification and random reproducibility") {
    const auto root = mvtest::scratch_dir("cli_mine");
    const auto r = cli({"mine-views", "--manifest", manifest_path(), "--out", (root / "sg").string(), "--n", "2",
                        "--verify", "--bins", "16", "--side", "16"});
    REQUIRE(r.code == 0);
    const auto lines = lines_of(slurp(root / "sg" / "views.jsonl"));
    CHECK(lines.size() == 64);
    for (const auto& line : lines) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j["views"].size() <= 2);
    }

    std::vector<std::string> outputs;
    for (const char* name : {"r1", "r2"}) {
        REQUIRE(cli({"mine-views", "--manifest", manifest_path(), "--out", (root / name).string(), "--method",
                     "random", "--seed", "3", "--n", "2"})
                    .code == 0);
        outputs.push_back(slurp(root / name / "views.jsonl"));
    }
    CHECK(outputs[0] == outputs[1]);
    REQUIRE(cli({"mine-views", "--manifest", manifest_path(), "--out", (root / "r3").string(), "--method", "random",
                 "--seed", "4", "--n", "2"})
                .code == 0);
    CHECK(slurp(root / "r3" / "views.jsonl") != outputs[0]);

    CHECK(cli({"mine-views", "--manifest", (root / "absent.jsonl").string(), "--out", (root / "x").string()}).code ==
          2);
    CHECK(cli({"mine-views", "--manifest", manifest_path(), "--out", (root / "y").string(), "--method", "best"})
              .code == 1);
}

TEST_CASE("loss presets map onto enabled terms") {
    const auto root = mvtest::scratch_dir("cli_presets");
    struct Case {
        std::string preset;
        std::string s_sa2, t_sa2, t_sa1, tau, label_mode;
    };
    const std::vector<Case> cases{{"source-only", "false", "false", "false", "0.80000000000000004", "hard"},
                                  {"fixmatch", "false", "false", "true", "0.80000000000000004", "hard"},
                                  {"mv-match-hard", "true", "true", "true", "0.80000000000000004", "hard"},
                                  {"mv-match-soft", "true", "true", "true", "0", "soft"}};
    for (const auto& c : cases) {
        const auto out = root / c.preset;
        REQUIRE(cli({"train", "--manifest", manifest_path(), "--out", out.string(), "--loss-preset", c.preset,
                     "--epochs", "1", "--set", "input_side=8", "--set", "nmi_side=16"})
                    .code == 0);
        const auto run = nlohmann::json::parse(slurp(out / "run.json"));
        const auto& s = run["settings"];
        CHECK(s["s_sa2"] == c.s_sa2);
        CHECK(s["t_sa2"] == c.t_sa2);
        CHECK(s["t_sa1"] == c.t_sa1);
        CHECK(s["tau"] == c.tau);
        CHECK(s["label_mode"] == c.label_mode);
        // Disabled terms stay at zero in every metrics row.
        const auto rows = lines_of(slurp(out / "metrics.csv"));
        const auto header = split_csv(rows[0]);
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto cells = split_csv(rows[r]);
            for (std::size_t k = 0; k < header.size(); ++k)
                if ((header[k] == "s_sa2" && c.s_sa2 == "false") || (header[k] == "t_sa1" && c.t_sa1 == "false"))
                    CHECK(cells[k] == "0");
        }
    }
}

TEST_CASE("train, eval and split soundness") {
    const auto root = mvtest::scratch_dir("cli_train");
    const auto out = root / "run";
    REQUIRE(cli({"train", "--manifest", manifest_path(), "--out", out.string(), "--epochs", "2", "--set",
                 "input_side=8", "--set", "nmi_side=16", "--seed", "3"})
                .code == 0);
    const auto run = nlohmann::json::parse(slurp(out / "run.json"));
    const double final_top1 = run["final_target_top1"].get<double>();

    const auto ev = cli({"eval", "--checkpoint", (out / "model.ckpt").string()});
    REQUIRE(ev.code == 0);
    const auto report = nlohmann::json::parse(slurp(out / "eval-target-test" / "eval.json"));
    CHECK(report["top1"].get<double>() == final_top1);
    const auto rows = lines_of(slurp(out / "metrics.csv"));
    CHECK(std::stod(split_csv(rows.back()).back()) == final_top1);

    // Re-running from run.json reproduces the checkpoint bytes.
    REQUIRE(cli({"train", "--config", (out / "run.json").string(), "--out", (root / "again").string()}).code == 0);
    CHECK(slurp(root / "again" / "model.ckpt") == slurp(out / "model.ckpt"));
    CHECK(slurp(root / "again" / "metrics.csv") == slurp(out / "metrics.csv"));

    // Train and test splits never share a container.
    const auto ex = load_experiment(manifest_path(), "auto");
    std::set<std::string> train_c, test_c;
    for (const auto& r : ex->source_train.records) train_c.insert(r.container_id);
    for (const auto& r : ex->target_train) train_c.insert(r.container_id);
    for (const auto& r : ex->source_test.records) test_c.insert(r.container_id);
    for (const auto& r : ex->target_test.records) test_c.insert(r.container_id);
    CHECK(!train_c.empty());
    CHECK(!test_c.empty());
    for (const auto& c : test_c) CHECK(train_c.count(c) == 0);

    REQUIRE(cli({"eval", "--checkpoint", (out / "model.ckpt").string(), "--split", "train", "--domain", "source"})
                .code == 0);
    const auto tr = nlohmann::json::parse(slurp(out / "eval-source-train" / "eval.json"));
    CHECK(tr["n"].get<std::size_t>() == ex->source_train.records.size());

    // A checkpoint for a different class count is refused with a data error.
    const auto other = root / "three";
    REQUIRE(cli({"gen-data", "--out", other.string(), "--classes", "3", "--containers", "2", "--dates", "1",
                 "--views", "2", "--size", "16"})
                .code == 0);
    const auto mismatch = cli({"eval", "--checkpoint", (out / "model.ckpt").string(), "--manifest",
                               (other / "manifest.jsonl").string(), "--out", (root / "mm").string()});
    CHECK(mismatch.code == 2);
    CHECK(mismatch.err.find("class") != std::string::npos);
}

TEST_CASE("ablate grid shape and usage errors") {
    const auto root = mvtest::scratch_dir("cli_ablate");
    const auto r = cli({"ablate", "--manifest", manifest_path(), "--out", root.string() + "/grid", "--axis",
                        "n_views=1,2,3", "--axis", "mining=sgvm,random", "--set", "epochs=1", "--set",
                        "input_side=8", "--set", "nmi_side=16", "--set", "loss_preset=mv-match-hard", "--seeds",
                        "0", "--parallel", "2"});
    REQUIRE(r.code == 0);
    const auto rows = lines_of(slurp(root / "grid" / "results.csv"));
    REQUIRE(rows.size() == 7);
    CHECK(rows[0] == "n_views,mining,top1_seed0,mean_top1,std_top1");
    std::set<std::pair<std::string, std::string>> cells;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto c = split_csv(rows[i]);
        REQUIRE(c.size() == 5);
        cells.insert({c[0], c[1]});
        const double top1 = std::stod(c[2]);
        CHECK(top1 >= 0.0);
        CHECK(top1 <= 1.0);
    }
    CHECK(cells.size() == 6);

    CHECK(cli({}).code == 1);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({"train", "--bogus"}).code == 1);
    CHECK(cli({"train", "--manifest", manifest_path(), "--out", (root / "t").string(), "--set", "tau=2"}).code == 1);
    CHECK(cli({"train", "--manifest", manifest_path(), "--out", (root / "u").string(), "--set", "nope=1"}).code == 1);
    CHECK(cli({"ablate", "--manifest", manifest_path(), "--out", (root / "v").string(), "--axis", "tau=0.5,7"})
              .code == 1);
}
