#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ucgsd.hpp"

using namespace ucgsd;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(UCGSD_SOURCE_DIR) / "configs";

class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() /
               ("ucgsd_cli_" + std::to_string(::getpid()) + "_" +
                ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    // Runs the CLI binary; stdout and stderr land in dir_/stdout.txt.
    int run(const std::string& args, const std::string& env = "") {
        const std::string cmd =
            env + " '" + std::string(UCGSD_CLI_PATH) + "' " + args + " > '" + (dir_ / "stdout.txt").string() + "' 2>&1";
        const int status = std::system(cmd.c_str());
        return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    }

    std::string stdout_text() const { return slurp(dir_ / "stdout.txt"); }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    fs::path write(const std::string& name, const std::string& text) const {
        std::ofstream(dir_ / name) << text;
        return dir_ / name;
    }

    // Small config with overridable fields.
    fs::path small_config(const std::string& name, const std::string& optimizer, std::size_t steps,
                          double log_range = 3.0, const std::string& extra = "") const {
        return write(name, R"({"seed": 3, "task": "SyntheticRegression",
            "architecture": {"input_dim": 4, "hidden": [8], "output_dim": 2, "nonlinearity": "relu"},
            "optimizer": )" + optimizer + R"(, "steps": )" + std::to_string(steps) +
                               R"(, "batch_size": 16, "dataset_size": 64, "log_range": )" +
                               format_double(log_range) + extra + "}");
    }

    fs::path dir_;
};

std::vector<std::string> lines_of(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

} // namespace

TEST_F(CliTest, CanonPrintsDecomposition) {
    const auto m = write("m.txt", "2 2\n1 4\n4 16\n");
    ASSERT_EQ(run("canon '" + m.string() + "' --out '" + (dir_ / "c").string() + "'"), 0);
    const auto out = stdout_text();
    EXPECT_NE(out.find("residual="), std::string::npos);
    EXPECT_EQ(slurp(dir_ / "c" / "canon.txt"), out);
    // W' of a rank-one positive matrix is all ones
    std::istringstream in(out);
    read_vector(in);
    const Matrix wp = read_matrix(in);
    for (double v : wp.data()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST_F(CliTest, ExitCodes) {
    EXPECT_EQ(run("canon '" + write("z.txt", "2 2\n0 0\n0 0\n").string() + "'"), 3);
    EXPECT_EQ(run("canon '" + write("bad.txt", "2 2\n1 x\n").string() + "'"), 2);
    EXPECT_EQ(run("canon '" + write("nan.txt", "1 2\n1 nan\n").string() + "'"), 2);
    EXPECT_EQ(run("canon '" + (dir_ / "missing.txt").string() + "'"), 2);
    EXPECT_EQ(run("train --config '" + write("j.json", "{ not json").string() + "'"), 2);
    EXPECT_EQ(run("train --config '" + small_config("u.json", R"({"kind": "UCGSD"})", 1, 3.0, R"(, "colour": 1)").string() +
                  "'"),
              2);
    EXPECT_EQ(run("train --config '" + small_config("k.json", R"({"kind": "Lion"})", 1).string() + "'"), 2);
    EXPECT_EQ(run("train --config '" + write("t.json", R"({"seed": 1, "task": "SyntheticRegression",
        "architecture": {"input_dim": 4, "hidden": [8], "output_dim": 2, "nonlinearity": "tanh"},
        "optimizer": {"kind": "UCGSD"}, "steps": 1, "batch_size": 4})")
                                       .string() +
                  "'"),
              2);
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("train"), 2);
}

TEST_F(CliTest, GradcheckPassesAndDetectsCorruption) {
    const auto cfg = small_config("g.json", R"({"kind": "UCGSD"})", 1);
    const std::string out = " --out '" + (dir_ / "g").string() + "'";
    EXPECT_EQ(run("gradcheck --config '" + cfg.string() + "'" + out), 0) << stdout_text();
    EXPECT_EQ(stdout_text().rfind("PASS", 0), 0u);
    EXPECT_EQ(run("gradcheck --corrupt-gradient --config '" + cfg.string() + "'" + out), 4);
    EXPECT_EQ(stdout_text().rfind("FAIL", 0), 0u);
}

TEST_F(CliTest, OutputsAreDeterministicAcrossRunsAndThreadCounts) {
    const auto cfg = small_config("d.json", R"({"kind": "UCAdam", "eta": 0.001})", 30);
    for (const std::string sub : {"train", "equivariance-check", "gradcheck"}) {
        const std::string csv = sub == "train" ? "train.csv" : sub == "gradcheck" ? "gradcheck.csv" : "equiv.csv";
        std::string first;
        int idx = 0;
        for (const std::string env : {"UC_GRAD_THREADS=1", "UC_GRAD_THREADS=4", ""}) {
            const auto out = dir_ / (sub + std::to_string(idx++));
            ASSERT_EQ(run(sub + " --config '" + cfg.string() + "' --out '" + out.string() + "'", env), 0)
                << sub << ": " << stdout_text();
            const auto text = slurp(out / csv);
            ASSERT_FALSE(text.empty());
            EXPECT_EQ(text.rfind("# config_hash=", 0), 0u);
            if (first.empty())
                first = text;
            else
                EXPECT_EQ(text, first) << sub << " with " << env;
        }
    }
}

TEST_F(CliTest, SeedOverrideChangesOutputAndHash) {
    const auto cfg = small_config("s.json", R"({"kind": "UCGSD"})", 5);
    ASSERT_EQ(run("train --config '" + cfg.string() + "' --out '" + (dir_ / "a").string() + "'"), 0);
    ASSERT_EQ(run("train --config '" + cfg.string() + "' --seed 3 --out '" + (dir_ / "b").string() + "'"), 0);
    ASSERT_EQ(run("train --config '" + cfg.string() + "' --seed 4 --out '" + (dir_ / "c").string() + "'"), 0);
    EXPECT_EQ(slurp(dir_ / "a" / "train.csv"), slurp(dir_ / "b" / "train.csv"));
    const auto a = lines_of(slurp(dir_ / "a" / "train.csv"));
    const auto c = lines_of(slurp(dir_ / "c" / "train.csv"));
    EXPECT_NE(a[0], c[0]);
    EXPECT_NE(a[2], c[2]);
}

TEST_F(CliTest, ZeroStepsWritesHeaderAndInitialParameters) {
    const auto cfg = small_config("z.json", R"({"kind": "UCGSD"})", 0);
    const auto out = dir_ / "z";
    ASSERT_EQ(run("train --config '" + cfg.string() + "' --out '" + out.string() + "'"), 0);
    EXPECT_EQ(lines_of(slurp(out / "train.csv")).size(), 2u);
    const Network saved = load_network(out / "network.json");
    const Network init = build_network(load_experiment_config(cfg).architecture, 3);
    for (auto k : init.parameter_keys()) {
        const auto a = saved.param(k), b = init.param(k);
        ASSERT_EQ(a.size(), b.size());
        for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
    }
}

TEST_F(CliTest, TrainingReducesLoss) {
    CommandOptions opt;
    opt.config_path = small_config("l.json", R"({"kind": "UCGSD", "eta": 0.01})", 500).string();
    opt.out_dir = (dir_ / "l").string();
    std::ostringstream out, err;
    ASSERT_EQ(cmd_train(opt, out, err), 0) << err.str();
    double initial = 0, final_loss = 0;
    ASSERT_EQ(std::sscanf(out.str().c_str(), "initial_loss=%lf final_loss=%lf", &initial, &final_loss), 2);
    EXPECT_LT(final_loss, 0.5 * initial);
}

TEST_F(CliTest, EquivarianceCommandReportsPerOptimizer) {
    std::ostringstream out, err;
    CommandOptions opt;
    opt.out_dir = (dir_ / "e").string();
    opt.config_path = small_config("zero.json", R"({"kind": "UCGSD"})", 20, 0.0).string();
    ASSERT_EQ(cmd_equivariance(opt, out, err), 0);
    EXPECT_EQ(out.str().rfind("PASS UCGSD max_weight_dev=0 ", 0), 0u) << out.str();

    out.str("");
    opt.config_path = small_config("sgd.json", R"({"kind": "SGD", "eta": 0.001})", 20).string();
    ASSERT_EQ(cmd_equivariance(opt, out, err), 0);
    EXPECT_EQ(out.str().rfind("baseline SGD", 0), 0u);

    const auto rows = lines_of(slurp(dir_ / "e" / "equiv.csv"));
    EXPECT_EQ(rows.size(), 22u);
    EXPECT_EQ(rows[1], "step,max_weight_dev,loss_gap");
}

TEST(ConfigHash, IgnoresOutputDirectoryButTracksContent) {
    const auto j = json::parse(R"({"seed": 1, "task": "SyntheticRegression",
        "architecture": {"input_dim": 2, "hidden": [3], "output_dim": 1},
        "optimizer": {"kind": "UCGSD"}, "steps": 1, "batch_size": 2})");
    auto a = parse_experiment_config(j), b = a;
    b.out_dir = "elsewhere";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.optimizer.eta *= 2;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(ConfigParse, ShippedConfigsLoad) {
    for (const auto& e : fs::directory_iterator(kConfigs)) {
        SCOPED_TRACE(e.path().string());
        const auto cfg = load_experiment_config(e.path());
        EXPECT_NO_THROW(build_network(cfg.architecture, cfg.seed).validate());
    }
}
