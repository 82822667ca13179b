#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pmtrans/cli.hpp"

#ifndef PMTRANS_CLI
#error "PMTRANS_CLI must name the pmtrans executable"
#endif

using namespace pmtrans;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Outcome {
    int code = -1;
    std::string out, err;
};

// A scratch directory per test, holding configs, datasets and outputs.
class CliTest : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / "pmtrans_cli_test" / info->name();
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }

    fs::path path(const std::string& name) const { return dir_ / name; }

    // Small, fast settings; `extra` lines replace matching defaults.
    std::string write_config(const std::string& name, const std::string& extra = "") const {
        std::map<std::string, std::string> kv{{"seed", "0"},
                                              {"n_per_domain", "40"},
                                              {"batch_size", "16"},
                                              {"epochs", "2"},
                                              {"warmup_epochs", "1"},
                                              {"source_path", path("source.pmds").string()},
                                              {"target_path", path("target.pmds").string()},
                                              {"output_dir", path("out").string()}};
        std::istringstream in(extra);
        for (std::string line; std::getline(in, line);) {
            const auto eq = line.find(" = ");
            kv[line.substr(0, eq)] = line.substr(eq + 3);
        }
        std::ofstream out(path(name));
        out << "# tiny run\n";
        for (const auto& [k, v] : kv) out << k << " = " << v << '\n';
        return path(name).string();
    }

    Outcome run(const std::string& args, const std::string& env = "") const {
        const auto out = path("stdout.txt"), err = path("stderr.txt");
        const std::string cmd = env + " " + PMTRANS_CLI + " " + args + " >" + out.string() + " 2>" + err.string();
        const int status = std::system(cmd.c_str());
        Outcome r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }

    void generate(const std::string& cfg) const { ASSERT_EQ(run("generate " + cfg).code, 0); }

    fs::path dir_;
};

}  // namespace

TEST(Config, ParsesCommentsAndRoundTripsCanonicalText) {
    RunConfig c = parse_config("seed = 3  # trailing\n\n# whole line\nmix_mode = cutmix\nbeta_mode = fixed:2:0.5\n");
    EXPECT_EQ(c.train.seed, 3u);
    EXPECT_EQ(c.train.mix_mode, MixMode::cutmix);
    EXPECT_EQ(canonical_text(parse_config(canonical_text(c))), canonical_text(c));
}

TEST(Config, RejectsBadInput) {
    EXPECT_THROW(parse_config("seed = 0\nlearning_rate = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\nseed = 1\n"), ConfigError);
    EXPECT_THROW(parse_config("epochs = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\nepochs three\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\nepochs = -1\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\nmix_mode = blend\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\nshift_noise = -0.5\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\npooling = mean\nattention = cls\n"), ConfigError);
    EXPECT_THROW(parse_config("seed = 0\nseeds = \n"), ConfigError);
}

TEST(Config, DigestIgnoresOutputLocation) {
    RunConfig a = parse_config("seed = 0\noutput_dir = x\n"), b = parse_config("seed = 0\noutput_dir = y\nworkers = 3\n");
    RunConfig c = parse_config("seed = 1\n");
    EXPECT_EQ(cli::config_digest(a), cli::config_digest(b));
    EXPECT_NE(cli::config_digest(a), cli::config_digest(c));
    EXPECT_EQ(cli::config_digest(a).size(), 64u);
}

TEST(Arms, ParseNamesAndOverrides) {
    auto a = cli::parse_arm("mixup: mix_mode = mixup ; use_lf=false;");
    EXPECT_EQ(a.name, "mixup");
    ASSERT_EQ(a.overrides.size(), 2u);
    EXPECT_EQ(a.overrides[0], (std::pair<std::string, std::string>{"mix_mode", "mixup"}));
    EXPECT_EQ(a.overrides[1], (std::pair<std::string, std::string>{"use_lf", "false"}));
    EXPECT_TRUE(cli::parse_arm("plain").overrides.empty());
    EXPECT_THROW(cli::parse_arm(":mix_mode=none"), ConfigError);
    EXPECT_THROW(cli::parse_arm("a:mix_mode"), ConfigError);
    RunConfig base = parse_config("seed = 0\n");
    EXPECT_EQ(cli::arm_config(base, cli::parse_arm("b:beta_mode=fixed:1:1")).train.beta_mode.learnable, false);
    EXPECT_THROW(cli::arm_config(base, cli::parse_arm("c:nope=1")), ConfigError);
}

TEST(ExitCodes, MapErrorKinds) {
    EXPECT_EQ(cli::exit_code_for(ConfigError("x")), 1);
    EXPECT_EQ(cli::exit_code_for(FormatError("x", 0)), 2);
    EXPECT_EQ(cli::exit_code_for(DimensionError("x")), 2);
    EXPECT_EQ(cli::exit_code_for(NumericError("x")), 3);
    EXPECT_EQ(cli::exit_code_for(DegenerateInputError("x")), 3);
}

TEST_F(CliTest, GeneratePrintsFileDigestsAndIsDeterministic) {
    const auto cfg = write_config("run.cfg");
    Outcome a = run("generate " + cfg);
    ASSERT_EQ(a.code, 0) << a.err;
    const std::string src = path("source.pmds").string(), tgt = path("target.pmds").string();
    EXPECT_EQ(a.out, sha256_file(src) + "  " + src + "\n" + sha256_file(tgt) + "  " + tgt + "\n");
    Outcome b = run("generate " + cfg);
    EXPECT_EQ(a.out, b.out);
    Dataset ds = load(tgt);
    EXPECT_EQ(ds.size(), 40u);
    EXPECT_TRUE(ds.shift == ShiftSpec::default_target());
}

TEST_F(CliTest, ConfigProblemsExitWithOne) {
    EXPECT_EQ(run("generate " + write_config("bad.cfg", "shift_noise = -1\n")).code, 1);
    std::ofstream(write_config("dup.cfg"), std::ios::app) << "seed = 1\n";
    EXPECT_EQ(run("generate " + path("dup.cfg").string()).code, 1);
    EXPECT_EQ(run("train " + path("missing.cfg").string()).code, 1);
    EXPECT_EQ(run("frobnicate").code, 1);
    Outcome r = run("train " + write_config("unknown.cfg", "colour = blue\n"));
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("colour"), std::string::npos);
}

TEST_F(CliTest, MissingOrForeignDatasetsExitWithTwo) {
    EXPECT_EQ(run("train " + write_config("run.cfg")).code, 2);
    generate(write_config("gen.cfg", "n_classes = 3\n"));
    EXPECT_EQ(run("train " + write_config("run4.cfg")).code, 2);
}

TEST_F(CliTest, EpochsZeroWritesOneRecord) {
    const auto cfg = write_config("run.cfg", "epochs = 0\nwarmup_epochs = 0\n");
    generate(cfg);
    Outcome r = run("train " + cfg);
    ASSERT_EQ(r.code, 0) << r.err;
    auto records = read_metrics(path("out/metrics.jsonl").string());
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].epoch, 0u);
    EXPECT_TRUE(fs::exists(path("out/checkpoint.pmtc")));
}

TEST_F(CliTest, TrainRerunGivesIdenticalMetricsAndCarriesDigest) {
    const auto cfg = write_config("run.cfg");
    generate(cfg);
    Outcome a = run("train " + cfg);
    ASSERT_EQ(a.code, 0) << a.err;
    const std::string first = slurp(path("out/metrics.jsonl"));
    const std::string ckpt = slurp(path("out/checkpoint.pmtc"));
    EXPECT_EQ(read_metrics(path("out/metrics.jsonl").string()).size(), 3u);
    Outcome b = run("train " + cfg);
    ASSERT_EQ(b.code, 0);
    EXPECT_EQ(slurp(path("out/metrics.jsonl")), first);
    EXPECT_EQ(slurp(path("out/checkpoint.pmtc")), ckpt);
    EXPECT_EQ(a.out, b.out);

    const std::string digest = cli::config_digest(load_config(cfg));
    EXPECT_EQ(a.out.rfind("config " + digest + "\n", 0), 0u);
    auto info = nlohmann::json::parse(slurp(path("out/run_info.json")));
    EXPECT_EQ(info.at("config_digest").get<std::string>(), digest);
    EXPECT_EQ(info.at("source_digest").get<std::string>(), sha256_file(path("source.pmds").string()));
}

TEST_F(CliTest, OutputDirectoryComesFromEnvironment) {
    const auto cfg = write_config("run.cfg", "epochs = 0\nwarmup_epochs = 0\n");
    generate(cfg);
    const auto elsewhere = path("elsewhere");
    ASSERT_EQ(run("train " + cfg, "PMTRANS_OUT=" + elsewhere.string()).code, 0);
    EXPECT_TRUE(fs::exists(elsewhere / "metrics.jsonl"));
    EXPECT_FALSE(fs::exists(path("out/metrics.jsonl")));
}

TEST_F(CliTest, NoMixingHasNoCrossEntropyTerms) {
    const auto cfg = write_config("run.cfg", "mix_mode = none\n");
    generate(cfg);
    ASSERT_EQ(run("train " + cfg).code, 0);
    for (const auto& r : read_metrics(path("out/metrics.jsonl").string())) {
        EXPECT_EQ(r.losses.ce_total, 0.0f);
        EXPECT_EQ(r.losses.l_l_is + r.losses.l_l_it + r.losses.l_f_is + r.losses.l_f_it, 0.0f);
        EXPECT_FALSE(r.pseudo_acc.has_value());
    }
}

TEST_F(CliTest, AblateRunsEveryArmAndSeedInDeclarationOrder) {
    const auto cfg = write_config("run.cfg", "seeds = 0,1\nworkers = 2\n");
    generate(cfg);
    Outcome r = run("ablate " + cfg + " --arm 'src:mix_mode=none' --arm full");
    ASSERT_EQ(r.code, 0) << r.err;
    const std::string csv = slurp(path("out/ablation.csv"));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "seed,src,full");
    std::size_t rows = 0;
    for (char c : csv) rows += c == '\n';
    EXPECT_EQ(rows, 4u);
    EXPECT_NE(r.out.find(csv), std::string::npos);
    for (const char* arm : {"src", "full"})
        for (int s : {0, 1}) EXPECT_TRUE(fs::exists(path("out/ablate") / arm / ("seed" + std::to_string(s) + ".jsonl")));
    EXPECT_EQ(run("ablate " + cfg + " --arm 'bad:nope=1'").code, 1);
}

TEST_F(CliTest, SingleArmMatchesTrain) {
    const auto cfg = write_config("run.cfg", "seeds = 0\n");
    generate(cfg);
    ASSERT_EQ(run("train " + cfg).code, 0);
    ASSERT_EQ(run("ablate " + cfg).code, 0);
    EXPECT_EQ(slurp(path("out/ablate/base/seed0.jsonl")), slurp(path("out/metrics.jsonl")));
}

TEST_F(CliTest, EvalIsDeterministicAndChecksShapes) {
    const auto cfg = write_config("run.cfg");
    generate(cfg);
    ASSERT_EQ(run("train " + cfg).code, 0);
    const std::string args = "eval " + cfg + " --checkpoint " + path("out/checkpoint.pmtc").string() + " --dataset " +
                             path("target.pmds").string();
    Outcome a = run(args), b = run(args);
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_EQ(a.out.rfind("samples 40\naccuracy ", 0), 0u);
    for (int k = 0; k < 4; ++k) EXPECT_NE(a.out.find("class " + std::to_string(k) + " "), std::string::npos);

    const auto wide = write_config("wide.cfg", "embed_dim = 16\n");
    EXPECT_EQ(run("eval " + wide + " --checkpoint " + path("out/checkpoint.pmtc").string() + " --dataset " +
                  path("target.pmds").string())
                  .code,
              2);
    EXPECT_EQ(run("eval " + cfg + " --checkpoint " + path("source.pmds").string() + " --dataset " +
                  path("target.pmds").string())
                  .code,
              2);
}

TEST_F(CliTest, ConvergedSourceRunScoresHighOnItsTrainingSet) {
    const auto cfg = write_config("run.cfg", "n_per_domain = 200\nepochs = 30\nmix_mode = none\n");
    generate(cfg);
    ASSERT_EQ(run("train " + cfg).code, 0);
    Outcome r = run("eval " + cfg + " --checkpoint " + path("out/checkpoint.pmtc").string() + " --dataset " +
                path("source.pmds").string());
    ASSERT_EQ(r.code, 0);
    const double acc = std::stod(r.out.substr(r.out.find("accuracy ") + 9));
    EXPECT_GE(acc, 0.95);
}

TEST_F(CliTest, GradcheckPassesAndCatchesSignMutation) {
    Outcome ok = run("gradcheck");
    EXPECT_EQ(ok.code, 0) << ok.out;
    EXPECT_NE(ok.out.find("max rel_err per block:"), std::string::npos);
    EXPECT_NE(ok.out.find("gradcheck passed"), std::string::npos);
    Outcome bad = run("gradcheck --inject-sign-error");
    EXPECT_EQ(bad.code, 4);
    EXPECT_NE(bad.out.find("FAIL "), std::string::npos);
}
