#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>

#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

const std::string kCli = WMNET_CLI_PATH;
const std::string kMnistDir = WMNET_MNIST_DIR;

struct Outcome {
    int status = -1;
    std::string output;  // stdout and stderr
};

Outcome run(const std::string& args) {
    Outcome o;
    FILE* p = ::popen((kCli + " " + args + " 2>&1").c_str(), "r");
    if (!p) return o;
    std::array<char, 4096> buf;
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) o.output.append(buf.data(), n);
    const int raw = ::pclose(p);
    o.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    return o;
}

bool have_mnist() { return fs::exists(fs::path(kMnistDir) / "t10k-images-idx3-ubyte") || fs::exists(fs::path(kMnistDir) / "t10k-images-idx3-ubyte.gz"); }

std::vector<fs::path> find_files(const fs::path& root, const std::string& name) {
    std::vector<fs::path> out;
    if (!fs::exists(root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.path().filename() == name) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t line_count(const fs::path& p) {
    std::ifstream f(p);
    std::size_t n = 0;
    for (std::string l; std::getline(f, l);) ++n;
    return n;
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("wmnet_cli_" + std::to_string(::getpid()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }
    fs::path dir_;
};

}  // namespace

TEST_F(CliTest, InspectPrintsPerLayerTableAndTotals) {
    const auto o = run("inspect --arch small_cnn --variant smoothing");
    ASSERT_EQ(o.status, 0) << o.output;
    EXPECT_NE(o.output.find("body.0.wm"), std::string::npos);
    EXPECT_NE(o.output.find("head.fc2"), std::string::npos);
    EXPECT_TRUE(std::regex_search(o.output, std::regex(R"(total\s+1487178\s+\d+)"))) << o.output;
}

TEST_F(CliTest, UnknownConfigKeyRejected) {
    std::ofstream(dir_ / "bad.toml") << "variant = \"unsharp\"\ncolour = \"blue\"\n";
    const auto o = run("inspect --config " + (dir_ / "bad.toml").string());
    EXPECT_NE(o.status, 0);
    EXPECT_NE(o.output.find("colour"), std::string::npos) << o.output;
}

TEST_F(CliTest, FlagsOverrideConfigFile) {
    std::ofstream(dir_ / "run.toml") << "arch = \"densenet\"\nvariant = \"conv\"\n";
    const auto o = run("inspect --config " + (dir_ / "run.toml").string() + " --arch resnet");
    ASSERT_EQ(o.status, 0) << o.output;
    EXPECT_NE(o.output.find("family=resnet"), std::string::npos);
    EXPECT_NE(o.output.find("layer_kind=conv"), std::string::npos);
}

TEST_F(CliTest, InvalidSpecAndMissingInputsNameTheCause) {
    auto o = run("inspect --kernel-size 5");
    EXPECT_NE(o.status, 0);
    EXPECT_NE(o.output.find("kernel-size"), std::string::npos);
    o = run("eval --checkpoint " + (dir_ / "absent.wmn").string());
    EXPECT_NE(o.status, 0);
    EXPECT_NE(o.output.find("absent.wmn"), std::string::npos);
    o = run("train --data-dir " + (dir_ / "no_mnist").string());
    EXPECT_NE(o.status, 0);
    EXPECT_NE(o.output.find("MNIST"), std::string::npos);
    o = run("noise-sweep --data-dir " + kMnistDir);
    EXPECT_NE(o.status, 0);
    EXPECT_NE(o.output.find("--checkpoint"), std::string::npos);
}

TEST_F(CliTest, TrainThreeSeedsThenSweepEvalAndGradCam) {
    if (!have_mnist()) GTEST_SKIP() << "MNIST not found in " << kMnistDir;
    const std::string common = "--data-dir " + kMnistDir + " --out-dir " + dir_.string();
    auto o = run("train " + common + " --variant unsharp --epochs 1 --train-subset 256 --subset 100 --seeds 1 2 3");
    ASSERT_EQ(o.status, 0) << o.output;
    EXPECT_TRUE(std::regex_search(o.output, std::regex(R"(\d+\.\d\d ± \d+\.\d\d %)"))) << o.output;
    const auto checkpoints = find_files(dir_, "model.wmn");
    ASSERT_EQ(checkpoints.size(), 3u);
    for (int seed = 1; seed <= 3; ++seed) {
        bool found = false;
        for (const auto& c : checkpoints)
            found = found || std::regex_match(c.parent_path().filename().string(),
                                              std::regex("run-\\d{8}-\\d{6}-" + std::to_string(seed)));
        EXPECT_TRUE(found) << "no run directory for seed " << seed;
    }
    EXPECT_EQ(find_files(dir_, "config.toml").size(), 3u);

    // the config copy replays the run bit for bit
    const fs::path replay = dir_ / "replay";
    o = run("train --config " + (checkpoints[0].parent_path() / "config.toml").string() + " --seeds 1 --out-dir " +
            replay.string());
    ASSERT_EQ(o.status, 0) << o.output;
    const auto replayed = find_files(replay, "model.wmn");
    ASSERT_EQ(replayed.size(), 1u);
    std::ifstream a(checkpoints[0], std::ios::binary), b(replayed[0], std::ios::binary);
    EXPECT_TRUE(std::equal(std::istreambuf_iterator<char>(a), {}, std::istreambuf_iterator<char>(b), {}));

    const fs::path sweeps = dir_ / "sweeps";
    o = run("noise-sweep --data-dir " + kMnistDir + " --out-dir " + sweeps.string() + " --subset 50 --checkpoint " +
            checkpoints[0].string());
    ASSERT_EQ(o.status, 0) << o.output;
    const auto agg = find_files(sweeps, "noise_aggregate.csv");
    ASSERT_EQ(agg.size(), 1u);
    EXPECT_EQ(line_count(agg[0]), 1u + 9u);

    o = run("fgsm-sweep --data-dir " + kMnistDir + " --out-dir " + sweeps.string() +
            " --subset 50 --levels 0 0.1 0.5 --seeds 1 2 3 --checkpoint " + checkpoints[0].string() + " " +
            checkpoints[1].string() + " " + checkpoints[2].string());
    ASSERT_EQ(o.status, 0) << o.output;
    const auto trials = find_files(sweeps, "fgsm_trials.csv");
    ASSERT_EQ(trials.size(), 1u);
    EXPECT_EQ(line_count(trials[0]), 1u + 3u * 3u);

    o = run("eval --data-dir " + kMnistDir + " --subset 100 --checkpoint " + checkpoints[0].string());
    ASSERT_EQ(o.status, 0) << o.output;
    EXPECT_TRUE(std::regex_search(o.output, std::regex(R"(test error \d+\.\d\d ± 0\.00 %)"))) << o.output;

    const fs::path cams = dir_ / "cams";
    o = run("gradcam --data-dir " + kMnistDir + " --out-dir " + cams.string() + " --images 0 1 --checkpoint " +
            checkpoints[0].string());
    ASSERT_EQ(o.status, 0) << o.output;
    std::size_t pgm = 0;
    for (const auto& e : fs::recursive_directory_iterator(cams)) pgm += e.path().extension() == ".pgm";
    EXPECT_EQ(pgm, 4u);
}
