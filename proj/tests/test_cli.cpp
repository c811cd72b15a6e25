// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <string>

namespace {

struct run_result {
    int status = -1;
    std::string output;
};

run_result run(const std::string& args) {
    run_result r;
    const std::string cmd = std::string(HLM_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    if (p == nullptr) return r;
    char buf[512];
    while (std::fgets(buf, sizeof buf, p) != nullptr) r.output += buf;
    const int st = pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::filesystem::path scratch(const std::string& name) {
    auto d = std::filesystem::temp_directory_path() / ("hlm-cli-" + std::to_string(::getpid()) + "-" + name);
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

}  // namespace

TEST(Cli, HelpExitsZero) {
    auto r = run("--help");
    EXPECT_EQ(r.status, 0);
    EXPECT_NE(r.output.find("train-adapter"), std::string::npos);
}

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("").status, 2);
    EXPECT_EQ(run("no-such-command").status, 2);
    auto r = run("sample --out /tmp");  // --prompt is required
    EXPECT_EQ(r.status, 2);
    EXPECT_EQ(r.output.rfind("error: usage", 0), 0u) << r.output;
}

TEST(Cli, MissingCheckpointIsNamed) {
    auto d = scratch("missing");
    auto r = run("sample --prompt forward --out " + d.string());
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.output.find("error: missing_checkpoint"), std::string::npos) << r.output;
    std::filesystem::remove_all(d);
}

TEST(Cli, BadConfigKeyIsRejected) {
    auto d = scratch("config");
    const auto cfg = d / "bad.toml";
    FILE* f = std::fopen(cfg.c_str(), "w");
    std::fputs("[run]\nnot_a_key = 1\n", f);
    std::fclose(f);
    auto r = run("gen-data --config " + cfg.string() + " --out " + d.string());
    EXPECT_EQ(r.status, 1);
    EXPECT_NE(r.output.find("invalid_argument"), std::string::npos) << r.output;
    EXPECT_NE(r.output.find("run.not_a_key"), std::string::npos) << r.output;
    std::filesystem::remove_all(d);
}

TEST(Cli, GenDataWritesDatasetAndManifest) {
    auto d = scratch("gen");
    const auto cfg = d / "c.toml";
    FILE* f = std::fopen(cfg.c_str(), "w");
    std::fputs("[run]\nreps_per_cell = 1\n", f);
    std::fclose(f);
    auto r = run("gen-data --seed 4 --config " + cfg.string() + " --out " + d.string());
    EXPECT_EQ(r.status, 0) << r.output;
    EXPECT_TRUE(std::filesystem::exists(d / "dataset.hlmd"));
    EXPECT_TRUE(std::filesystem::exists(d / "dataset.hlmd.json"));
    std::filesystem::remove_all(d);
}
