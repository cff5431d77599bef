// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "femasr/femasr.hpp"

using namespace femasr;
namespace fs = std::filesystem;

namespace {

struct Prior {
    ModelConfig cfg;
    Codebook<float> cb{cfg.codebook_size, cfg.n_z, 1};
    Decoder<float> g{cfg, 2};
    Encoder<float> e{cfg, 3};
};

struct Run {
    int code = -1;
    std::string err;
};

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / ("femasr_cli_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Run cli(const std::string& args, const fs::path& dir) {
    const auto err = dir / "stderr.txt";
    const std::string cmd = std::string(FEMASR_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                            " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(err);
    std::ostringstream os;
    os << is.rdbuf();
    r.err = os.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Visualization

TEST(Viz, SizeContracts) {
    Prior p;
    const auto single = decode_single_code(p.cb, p.g, 5, 1);
    EXPECT_EQ(single.image.height, 8u);
    EXPECT_EQ(single.image.width, 8u);
    EXPECT_EQ(decode_single_code(p.cb, p.g, 0, 2).image.height, 16u);
    const std::vector<double> uniform(p.cb.size(), 1.0);
    EXPECT_EQ(decode_code_combo(p.cb, p.g, sample_index_grid(uniform, 8, 8, 1)).image.height, 64u);
    const auto big = decode_code_combo(p.cb, p.g, sample_index_grid(uniform, 16, 16, 1)).image;
    EXPECT_EQ(big.height, 128u);
    EXPECT_EQ(big.width, 128u);
}

TEST(Viz, RenderingsAreClippedAndFlagged) {
    Prior p;
    const auto r = decode_single_code(p.cb, p.g, 1, 1);
    for (float v : r.image.data) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
    }
    Image wild(1, 10, 10, 2.0f);
    EXPECT_TRUE(make_rendering(wild).flagged);
    EXPECT_FALSE(make_rendering(Image(1, 10, 10, 0.5f)).flagged);
}

TEST(Viz, RejectsBadGrids) {
    Prior p;
    EXPECT_THROW(decode_code_combo(p.cb, p.g, IndexGrid{{0, 1}, {2}}), std::invalid_argument);
    EXPECT_THROW(decode_code_combo(p.cb, p.g, IndexGrid{{0, 64}}), std::out_of_range);
    EXPECT_THROW(decode_code_combo(p.cb, p.g, IndexGrid{}), std::invalid_argument);
    EXPECT_THROW(decode_single_code(p.cb, p.g, 64, 1), std::out_of_range);
}

TEST(Viz, SampledGridFollowsSupport) {
    std::vector<double> dist(10, 0.0);
    dist[3] = 1;
    dist[7] = 3;
    const auto a = sample_index_grid(dist, 16, 16, 4), b = sample_index_grid(dist, 16, 16, 4);
    EXPECT_EQ(a, b);
    int sevens = 0;
    for (const auto& row : a)
        for (int v : row) {
            EXPECT_TRUE(v == 3 || v == 7);
            sevens += v == 7;
        }
    EXPECT_GT(sevens, 128);
    EXPECT_THROW(sample_index_grid(std::vector<double>(4, 0.0), 2, 2, 1), std::invalid_argument);
}

TEST(Viz, CategoryHistogramsNormalizeAndSkipEmpty) {
    Prior p;
    std::map<std::string, std::vector<Image>> groups;
    groups["stripes"] = {synth_texture(TextureKind::stripes, 32, 1), synth_texture(TextureKind::stripes, 32, 2)};
    groups["empty"] = {};
    std::ostringstream warn;
    const auto h = category_code_histogram(groups, p.e, p.cb, &warn);
    ASSERT_EQ(h.size(), 1u);
    double s = 0;
    for (double v : h.at("stripes")) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_NE(warn.str().find("empty"), std::string::npos);
}

TEST(Viz, ContactSheetLayout) {
    std::vector<Image> tiles(5, Image(3, 8, 8, 0.2f));
    const auto s = contact_sheet(tiles, 2, 2);
    EXPECT_EQ(s.width, 2 * 10 + 2u);
    EXPECT_EQ(s.height, 3 * 10 + 2u);
    tiles.push_back(Image(3, 4, 4));
    EXPECT_THROW(contact_sheet(tiles, 2), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Command line

TEST(Cli, UsageErrorsExitTwo) {
    const auto d = scratch("usage");
    EXPECT_EQ(cli("", d).code, 2);
    const auto r = cli("train-stage1 --bogus", d);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("error command=train-stage1 kind=usage"), std::string::npos);
    EXPECT_EQ(cli("--help", d).code, 0);
}

TEST(Cli, MissingSeedIsValidationError) {
    const auto d = scratch("seed");
    const auto r = cli("train-stage1 --synthetic 4 --out " + (d / "run").string(), d);
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("kind=validation"), std::string::npos);
    EXPECT_NE(r.err.find("--seed"), std::string::npos);
}

TEST(Cli, BadConfigValueNamesKey) {
    const auto d = scratch("config");
    const auto r = cli("train-stage1 --seed 1 --synthetic 4 --set model.codebook_size=abc --out " + (d / "r").string(), d);
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("model.codebook_size"), std::string::npos);
}

TEST(Cli, MakeTestsetIsDeterministic) {
    const auto d = scratch("testset");
    fs::create_directories(d / "src");
    write_png(d / "src" / "a.png", synth_texture(TextureKind::waves, 96, 1));
    write_png(d / "src" / "b.png", synth_texture(TextureKind::dots, 80, 2));
    for (const char* o : {"t1", "t2"})
        ASSERT_EQ(cli("make-testset --input " + (d / "src").string() + " --scale 2 --crop 64 --seed 123 --out " +
                          (d / o).string(),
                      d)
                      .code,
                  0);
    EXPECT_EQ(slurp(d / "t1" / "manifest.txt"), slurp(d / "t2" / "manifest.txt"));
    EXPECT_EQ(slurp(d / "t1" / "lr" / "0001.png"), slurp(d / "t2" / "lr" / "0001.png"));
    EXPECT_EQ(read_png(d / "t1" / "lr" / "0000.png").height, 32u);
    EXPECT_TRUE(fs::exists(d / "t1" / "effective_config.txt"));
    EXPECT_TRUE(fs::exists(d / "t1" / "logs" / "make-testset.log"));
}

TEST(Cli, TrainInferEvalPipeline) {
    const auto d = scratch("pipeline");
    const auto s1 = d / "s1", s2 = d / "s2";
    ASSERT_EQ(cli("train-stage1 --seed 1 --synthetic 8 --steps 3 --batch 2 --out " + s1.string(), d).code, 0);
    ASSERT_TRUE(fs::exists(s1 / "checkpoints" / "stage1_final.ckpt"));

    // Config snapshot reproduces the run bit for bit.
    ASSERT_EQ(cli("train-stage1 --config " + (s1 / "effective_config.txt").string() + " --out " + (d / "s1b").string(), d)
                  .code,
              0);
    EXPECT_EQ(slurp(s1 / "checkpoints" / "stage1_final.ckpt"), slurp(d / "s1b" / "checkpoints" / "stage1_final.ckpt"));

    const auto mismatch = cli("train-stage2 --seed 2 --synthetic 8 --steps 2 --stage1 " +
                                  (s1 / "checkpoints" / "stage1_final.ckpt").string() +
                                  " --set model.codebook_size=32 --out " + (d / "bad").string(),
                              d);
    EXPECT_EQ(mismatch.code, 1);
    EXPECT_NE(mismatch.err.find("codebook_size"), std::string::npos);

    ASSERT_EQ(cli("train-stage2 --seed 2 --synthetic 8 --steps 2 --batch 2 --stage1 " +
                      (s1 / "checkpoints" / "stage1_final.ckpt").string() + " --out " + s2.string(),
                  d)
                  .code,
              0);
    const auto ckpt = (s2 / "checkpoints" / "stage2_final.ckpt").string();
    write_png(d / "lr.png", Image(3, 12, 10, 0.4f));
    ASSERT_EQ(cli("infer --checkpoint " + ckpt + " --input " + (d / "lr.png").string() + " --scale 4 --out " +
                      (d / "out" / "sr.png").string(),
                  d)
                  .code,
              0);
    const auto sr = read_png(d / "out" / "sr.png");
    EXPECT_EQ(sr.height, 48u);
    EXPECT_EQ(sr.width, 40u);
    EXPECT_EQ(cli("infer --checkpoint " + ckpt + " --input " + (d / "lr.png").string() + " --scale 2 --out " +
                      (d / "out" / "sr2.png").string(),
                  d)
                  .code,
              1);

    fs::create_directories(d / "hr");
    write_png(d / "hr" / "sr.png", Image(3, 48, 40, 0.4f));
    ASSERT_EQ(cli("eval --sr " + (d / "out").string() + " --hr " + (d / "hr").string() + " --out " + (d / "ev").string(),
                  d)
                  .code,
              0);
    EXPECT_NE(slurp(d / "ev" / "reports" / "metrics.txt").find("summary count=1"), std::string::npos);

    ASSERT_EQ(cli("viz-codebook --checkpoint " + ckpt + " --out " + (d / "viz").string(), d).code, 0);
    EXPECT_EQ(read_png(d / "viz" / "samples" / "random_grid16.png").height, 128u + 4);
}

TEST(Cli, GradcheckCommandReports) {
    const auto d = scratch("gradcheck");
    ASSERT_EQ(cli("gradcheck --trials 3 --out " + d.string(), d).code, 0);
    EXPECT_NE(slurp(d / "reports" / "gradcheck.txt").find("passed=1"), std::string::npos);
}
