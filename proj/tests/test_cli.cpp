// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Drives the moelab executable through the shell.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <gtest/gtest.h>

#include "moelab/io.hpp"

namespace fs = std::filesystem;
using moelab::json;

namespace {

struct Result {
    int code = -1;
    std::string output;
};

Result run(const std::string& args) {
    const std::string cmd = std::string(MOELAB_CLI) + " " + args + " 2>&1";
    Result r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n = 0;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() /
               ("moelab_cli_" + std::to_string(::getpid()) + "_" + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        write_config("fast.ini", "");
    }
    void TearDown() override { fs::remove_all(dir_); }

    // Small dataset and short schedules; `extra` is appended verbatim.
    fs::path write_config(const std::string& name, const std::string& extra) {
        const auto p = dir_ / name;
        std::ofstream(p) << "[run]\nout = " << (dir_ / "out").string()
                         << "\n[dataset]\nexamples_per_subtask = 100\n[train]\nepochs = 3\n"
                         << "[realign]\nbudget = 10\nsteps_per_round = 5\n"
                         << extra;
        return p;
    }
    std::string cfg(const std::string& name = "fast.ini") const { return "--config " + (dir_ / name).string(); }
    fs::path out(const std::string& f) const { return dir_ / "out" / f; }

    fs::path dir_;
};

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) ++n;
    return n;
}

} // namespace

TEST_F(Cli, UsageErrorsExitOne) {
    EXPECT_EQ(run("").code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    EXPECT_EQ(run("train --no-such-flag").code, 1);
    EXPECT_EQ(run("pipeline sideways").code, 1);
    EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, ConfigErrors) {
    EXPECT_EQ(run("train --config " + (dir_ / "missing.ini").string()).code, 2);
    write_config("typo.ini", "[model]\ntopk = 2\n");
    const auto r = run("train " + cfg("typo.ini"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("topk"), std::string::npos) << r.output;
}

TEST_F(Cli, StageChainWritesArtifacts) {
    for (const char* stage : {"train", "trace", "attribute", "prune", "realign"}) {
        const auto r = run(std::string(stage) + " " + cfg());
        ASSERT_EQ(r.code, 0) << stage << ": " << r.output;
    }
    const auto e = run("eval " + cfg() + " --model " + out("realigned_model.json").string() + " --reference " +
                       out("model.json").string());
    ASSERT_EQ(e.code, 0) << e.output;
    ASSERT_EQ(run("curve " + cfg()).code, 0);
    for (const char* f : {"model.json", "trace.jsonl", "attribution.json", "plan.json", "pruned_model.json",
                          "al_history.json", "realigned_model.json", "metrics.json", "curve.csv"})
        EXPECT_TRUE(fs::exists(out(f))) << f;
    for (const char* f : {"attribution.json", "plan.json", "al_history.json", "metrics.json", "model.json"}) {
        const auto j = moelab::read_json(out(f));
        ASSERT_TRUE(j.contains("provenance")) << f;
        EXPECT_TRUE(j["provenance"].contains("config_hash")) << f;
        EXPECT_EQ(j["provenance"]["seed"].get<int>(), 1) << f;
    }
    // comment + header + one row per k = 8..1
    EXPECT_EQ(count_lines(out("curve.csv")), 10u);
    EXPECT_TRUE(moelab::read_json(out("metrics.json")).dump().find("normalized_score") != std::string::npos);
    EXPECT_EQ(moelab::read_json(out("al_history.json")).at("rounds").size(), 2u);
}

TEST_F(Cli, EmptyTraceIsRejected) {
    ASSERT_EQ(run("train " + cfg()).code, 0);
    ASSERT_EQ(run("trace " + cfg()).code, 0);
    std::string header;
    {
        std::ifstream in(out("trace.jsonl"));
        std::getline(in, header);
    }
    const auto empty = dir_ / "empty.jsonl";
    std::ofstream(empty) << header << '\n';
    const auto r = run("attribute " + cfg() + " --trace " + empty.string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("empty trace"), std::string::npos) << r.output;
}

TEST_F(Cli, MalformedInputsAreIoErrors) {
    std::ofstream(dir_ / "junk.json") << "{\"format_version\": 1";
    EXPECT_EQ(run("eval " + cfg() + " --model " + (dir_ / "junk.json").string()).code, 2);
    std::ofstream(dir_ / "junk.jsonl") << "not json\n";
    EXPECT_EQ(run("attribute " + cfg() + " --trace " + (dir_ / "junk.jsonl").string()).code, 2);
    EXPECT_EQ(run("trace " + cfg() + " --model " + (dir_ / "absent.json").string()).code, 2);
}

TEST_F(Cli, StrictThresholdNamesTheLayer) {
    write_config("thr.ini", "[pruning]\nstrategy = threshold\ntau = 0.99\n");
    ASSERT_EQ(run("train " + cfg("thr.ini")).code, 0);
    ASSERT_EQ(run("trace " + cfg("thr.ini")).code, 0);
    ASSERT_EQ(run("attribute " + cfg("thr.ini")).code, 0);
    const auto strict = run("prune " + cfg("thr.ini") + " --strict");
    EXPECT_EQ(strict.code, 1);
    EXPECT_NE(strict.output.find("layer 0"), std::string::npos) << strict.output;
    const auto lenient = run("prune " + cfg("thr.ini"));
    EXPECT_EQ(lenient.code, 0) << lenient.output;
    EXPECT_NE(lenient.output.find("warning"), std::string::npos) << lenient.output;
}

TEST_F(Cli, NonFiniteModelExitsThree) {
    ASSERT_EQ(run("train " + cfg()).code, 0);
    auto j = moelab::read_json(out("model.json"));
    // Overflowing input projection: inf - inf turns the residual stream into NaN.
    double sign = 1.0;
    for (auto& v : j["params"]["input_proj"]["data"]) {
        v = sign * 1e308;
        sign = -sign;
    }
    moelab::write_json(dir_ / "bad_model.json", j);
    const auto r = run("eval " + cfg() + " --model " + (dir_ / "bad_model.json").string());
    EXPECT_EQ(r.code, 3) << r.output;
}

TEST_F(Cli, PipelineIsDeterministicApartFromTimestamp) {
    write_config("pipe.ini", "[pipeline]\narms = none, random\n");
    const auto a = run("pipeline attack " + cfg("pipe.ini") + " --out " + (dir_ / "a").string());
    const auto b = run("pipeline attack " + cfg("pipe.ini") + " --out " + (dir_ / "b").string() + " --summary");
    ASSERT_EQ(a.code, 0) << a.output;
    ASSERT_EQ(b.code, 0) << b.output;
    auto ja = moelab::read_json(dir_ / "a" / "attack_report.json");
    auto jb = moelab::read_json(dir_ / "b" / "attack_report.json");
    ASSERT_TRUE(ja.contains("generated_at"));
    ja.erase("generated_at");
    jb.erase("generated_at");
    EXPECT_EQ(ja.dump(), jb.dump());
    EXPECT_EQ(moelab::read_text(dir_ / "a" / "curve.csv"), moelab::read_text(dir_ / "b" / "curve.csv"));
    EXPECT_NE(b.output.find("random"), std::string::npos) << b.output;
}

TEST_F(Cli, SeedFlagOverridesConfig) {
    ASSERT_EQ(run("train " + cfg() + " --seed 9").code, 0);
    EXPECT_EQ(moelab::read_json(out("model.json"))["provenance"]["seed"].get<int>(), 9);
}
