#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "omtl/cli.hpp"
#include "test_util.hpp"

using omtl::testing::data_path;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run run(std::vector<std::string> args) {
    args.insert(args.begin(), "omtl");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = omtl::cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "omtl_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST(Cli, ValidateGraphHappyPath) {
    auto r = run({"validate-graph", "--graph", data_path("chain.json")});
    EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, ValidateGraphCycleNamesTheCycle) {
    auto r = run({"validate-graph", "--graph", data_path("cycle.json")});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("cycle"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("->"), std::string::npos) << r.err;
}

TEST(Cli, UnknownFlagOrSubcommandIsAValidationError) {
    EXPECT_EQ(run({"validate-graph", "--graph", data_path("chain.json"), "--bogus"}).code, 1);
    EXPECT_EQ(run({"frobnicate"}).code, 1);
    EXPECT_EQ(run({"validate-graph"}).code, 1);
}

TEST(Cli, SynthIsByteIdenticalAcrossRuns) {
    const auto a = scratch("synth_a"), b = scratch("synth_b");
    for (const auto& dir : {a, b}) {
        auto r = run({"synth", "--benchmark", "--seed", "3", "--out-graph", (dir / "g.json").string(), "--out-data",
                      (dir / "d.jsonl").string()});
        ASSERT_EQ(r.code, 0) << r.err;
    }
    EXPECT_EQ(slurp(a / "g.json"), slurp(b / "g.json"));
    EXPECT_EQ(slurp(a / "d.jsonl"), slurp(b / "d.jsonl"));
    EXPECT_FALSE(slurp(a / "d.jsonl").empty());
    EXPECT_TRUE(fs::exists(a / "d.jsonl.manifest.json") || fs::exists(a / "g.json.manifest.json"));
}

TEST(Cli, GradcheckSeedSeven) {
    const auto dir = scratch("gradcheck");
    auto r = run({"gradcheck", "--seed", "7", "--out", (dir / "gc.json").string()});
    EXPECT_EQ(r.code, 0) << r.err;
    auto j = nlohmann::json::parse(slurp(dir / "gc.json"));
    EXPECT_LT(j.at("max_relative_error").get<double>(), 1e-4);
}

TEST(Cli, FoldsTrainEvalPipeline) {
    const auto dir = scratch("pipeline");
    const auto g = (dir / "g.json").string(), d = (dir / "d.jsonl").string();
    {
        std::ofstream cfg(dir / "synth.json");
        cfg << R"({"records_per_node": 40, "feature_dim": 6, "prevalence": {"mortality": 0.3}})";
    }
    ASSERT_EQ(run({"synth", "--config", (dir / "synth.json").string(), "--out-graph", g, "--out-data", d}).code, 0);
    {
        std::ofstream cfg(dir / "train.json");
        cfg << R"({"max_epochs": 2})";
    }
    const auto folds = (dir / "folds.json").string();
    ASSERT_EQ(run({"folds", "--graph", g, "--data", d, "--k", "3", "--seed", "1", "--out", folds}).code, 0);
    const auto model = (dir / "model.json").string();
    auto tr = run({"train", "--graph", g, "--data", d, "--config", (dir / "train.json").string(), "--variant", "omtl",
                   "--out", model, "--log", (dir / "log.json").string(), "--folds", folds, "--test-fold", "0"});
    ASSERT_EQ(tr.code, 0) << tr.err;
    auto ev = run({"eval", "--model", model, "--graph", g, "--data", d, "--report", (dir / "report.json").string(),
                   "--roc-out", (dir / "roc.json").string(), "--folds", folds, "--test-fold", "0"});
    ASSERT_EQ(ev.code, 0) << ev.err;
    auto report = nlohmann::json::parse(slurp(dir / "report.json"));
    EXPECT_FALSE(report.at("strata").empty());
    EXPECT_TRUE(fs::exists(dir / "model.json.manifest.json"));
    // Unknown variant and missing files are validation errors.
    EXPECT_EQ(run({"train", "--graph", g, "--data", d, "--variant", "xgb", "--out", model}).code, 1);
    EXPECT_EQ(run({"eval", "--model", (dir / "missing.json").string(), "--graph", g, "--data", d, "--report",
                   (dir / "r2.json").string()})
                  .code,
              1);
}
