#include "cli_support.hpp"
#include "moelens/checkpoint.hpp"
#include "moelens/errors.hpp"
#include "moelens/run_config.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

using namespace moelens;
using namespace moelens::testing;
namespace fs = std::filesystem;

TEST(RunConfigParse, DefaultsAndUnknownKeys) {
    const fs::path dir = fresh_dir("moelens_cfg");
    const RunConfig cfg = load_run_config(write_config(dir, nlohmann::json::object()));
    EXPECT_EQ(cfg.model, ModelConfig{});
    EXPECT_EQ(cfg.corpus_dir, dir / "corpus");
    EXPECT_EQ(cfg.analysis.domains.size(), 3u);

    auto bad = tiny_run_config();
    bad["train"]["momentum"] = 0.9;
    EXPECT_THROW(load_run_config(write_config(dir, bad)), ParameterError);
    auto unresolvable = tiny_run_config();
    unresolvable["output_dir"] = "missing/parent/out";
    EXPECT_THROW(load_run_config(write_config(dir, unresolvable)), InputError);

    EXPECT_EQ(load_run_config(MOELENS_SOURCE_DIR "/configs/default.json").model, ModelConfig{});
}

TEST(Cli, UsageErrors) {
    const fs::path dir = fresh_dir("moelens_cli_usage");
    auto r = run_cli("gen-corpus", dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("--config"), std::string::npos);
    EXPECT_TRUE(r.out.empty());

    r = run_cli("gen-corpus --config \"" + (dir / "nope.json").string() + "\"", dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);

    EXPECT_EQ(run_cli("frobnicate", dir).code, 2);
    EXPECT_EQ(run_cli("", dir).code, 2);
}

TEST(Cli, GenCorpusIsDeterministic) {
    const fs::path dir = fresh_dir("moelens_cli_gen");
    const auto cfg = write_config(dir, tiny_run_config());
    auto r = run_cli("gen-corpus --config \"" + cfg.string() + "\"", dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto j = nlohmann::json::parse(r.out);
    EXPECT_EQ(j.at("corpus_files").size(), 3u);
    const std::string a = slurp(dir / "corpus" / "A.bytes");
    EXPECT_EQ(a.size(), 3000u);

    ASSERT_EQ(run_cli("gen-corpus --config \"" + cfg.string() + "\" --out \"" + (dir / "again").string() + "\"", dir).code, 0);
    for (const char* d : {"A", "B", "C"}) {
        EXPECT_EQ(slurp(dir / "corpus" / (std::string(d) + ".bytes")), slurp(dir / "again" / (std::string(d) + ".bytes")));
    }

    auto two = tiny_run_config();
    two["analysis"]["domains"] = {"B", "C"};
    const auto cfg2 = write_config(dir, two, "two.json");
    r = run_cli("gen-corpus --config \"" + cfg2.string() + "\" --out \"" + (dir / "two").string() + "\"", dir);
    ASSERT_EQ(r.code, 0);
    EXPECT_EQ(nlohmann::json::parse(r.out).at("corpus_files").size(), 2u);

    const fs::path blocker = dir / "file";
    std::ofstream(blocker) << "x";
    EXPECT_EQ(run_cli("gen-corpus --config \"" + cfg.string() + "\" --out \"" + (blocker / "sub").string() + "\"", dir).code, 2);
}

TEST(Cli, TrainAnalyzePrune) {
    const fs::path dir = fresh_dir("moelens_cli_pipeline");
    const auto cfg = write_config(dir, tiny_run_config());
    const std::string c = " --config \"" + cfg.string() + "\"";
    ASSERT_EQ(run_cli("gen-corpus" + c, dir).code, 0);

    const fs::path model = dir / "model.moescp";
    auto r = run_cli("train" + c + " --out \"" + model.string() + "\"", dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(nlohmann::json::parse(r.out).at("steps"), 40);
    EXPECT_EQ(slurp(fs::path(model.string() + ".loss.csv")).rfind("step,cross_entropy,balance_loss\n", 0), 0u);

    EXPECT_EQ(run_cli("train" + c + " --out \"" + (dir / "no" / "such" / "m.moescp").string() + "\"", dir).code, 2);

    const fs::path init = dir / "init.moescp";
    ASSERT_EQ(run_cli("train" + c + " --steps 0 --out \"" + init.string() + "\"", dir).code, 0);
    EXPECT_EQ(serialize_checkpoint(load_checkpoint(init)), serialize_checkpoint(init_checkpoint(load_run_config(cfg).model)));

    const fs::path out = dir / "analysis";
    r = run_cli("analyze --model \"" + model.string() + "\"" + c + " --out \"" + out.string() + "\"", dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto summary = nlohmann::json::parse(slurp(out / "summary.json"));
    EXPECT_EQ(nlohmann::json::parse(r.out), summary);
    for (const char* f : {"specialization.csv", "similarity.csv", "perplexity.csv", "perplexity.svg",
                          "lens/probe0.json", "lens/probe2.svg", "specialization/layer1_C.svg"}) {
        EXPECT_TRUE(fs::exists(out / f)) << f;
    }
    EXPECT_NO_THROW(nlohmann::json::parse(slurp(out / "lens" / "probe1.json")));

    // Summary cosine values equal the CSV values.
    std::istringstream sim(slurp(out / "similarity.csv"));
    std::string line;
    std::getline(sim, line);
    int rows = 0;
    while (std::getline(sim, line)) {
        std::istringstream fields(line);
        std::string layer, domain, mean;
        std::getline(fields, layer, ',');
        std::getline(fields, domain, ',');
        std::getline(fields, mean, ',');
        EXPECT_EQ(summary.at("similarity").at(domain).at(static_cast<std::size_t>(std::stoi(layer))).get<double>(),
                  std::stod(mean));
        ++rows;
    }
    EXPECT_EQ(rows, 6);

    auto other = tiny_run_config();
    other["model"]["top_k"] = 3;
    const auto mismatch = write_config(dir, other, "mismatch.json");
    r = run_cli("analyze --model \"" + model.string() + "\" --config \"" + mismatch.string() + "\" --out \"" +
                    (dir / "x").string() + "\"",
                dir);
    EXPECT_EQ(r.code, 4);
    EXPECT_EQ(run_cli("analyze --model \"" + (dir / "absent").string() + "\"" + c, dir).code, 2);

    const std::string table = " --table \"" + (out / "specialization.csv").string() + "\"";
    const fs::path same = dir / "same.moescp";
    r = run_cli("prune --model \"" + model.string() + "\"" + table + " --threshold 0 --out \"" + same.string() + "\"", dir);
    ASSERT_EQ(r.code, 0) << r.err;
    const auto tokens = bytes_of("probe logits");
    EXPECT_TRUE(bitwise_equal(model_forward(tokens, load_checkpoint(same)).logits,
                              model_forward(tokens, load_checkpoint(model)).logits));

    const fs::path slim = dir / "slim.moescp";
    r = run_cli("prune --model \"" + model.string() + "\"" + table + " --threshold 2.0 --out \"" + slim.string() + "\"", dir);
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("kept"), std::string::npos);
    EXPECT_LE(fs::file_size(slim), fs::file_size(model));

    r = run_cli("prune --model \"" + model.string() + "\"" + table + " --threshold 2.0 --domain B --out \"" +
                    (dir / "b.moescp").string() + "\"",
                dir);
    ASSERT_EQ(r.code, 0) << r.err;
    bool fewer = false;
    const auto pruned = nlohmann::json::parse(r.out);
    for (const auto& layer : pruned.at("layers")) fewer |= layer.at("kept") < layer.at("total");
    EXPECT_TRUE(fewer) << r.out;
    EXPECT_LT(fs::file_size(dir / "b.moescp"), fs::file_size(model));

    EXPECT_EQ(run_cli("prune --model \"" + model.string() + "\" --table \"" + (dir / "none.csv").string() +
                          "\" --threshold 1 --out \"" + (dir / "p.moescp").string() + "\"",
                      dir)
                  .code,
              2);

    std::ofstream(dir / "wrong.csv") << "layer,expert,domain,fraction\n0,11,A,0.5\n";
    EXPECT_EQ(run_cli("prune --model \"" + model.string() + "\" --table \"" + (dir / "wrong.csv").string() +
                          "\" --threshold 1 --out \"" + (dir / "p.moescp").string() + "\"",
                      dir)
                  .code,
              4);
}

TEST(Cli, DivergenceExitsThree) {
    const fs::path dir = fresh_dir("moelens_cli_diverge");
    auto j = tiny_run_config();
    j["train"]["learning_rate"] = 1e9;
    const auto cfg = write_config(dir, j);
    ASSERT_EQ(run_cli("gen-corpus --config \"" + cfg.string() + "\"", dir).code, 0);
    const auto r = run_cli("train --config \"" + cfg.string() + "\" --out \"" + (dir / "m").string() + "\"", dir);
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("diverged"), std::string::npos);
}

TEST(Cli, CorruptCheckpointIsTyped) {
    const fs::path dir = fresh_dir("moelens_cli_corrupt");
    const auto cfg = write_config(dir, tiny_run_config());
    ASSERT_EQ(run_cli("gen-corpus --config \"" + cfg.string() + "\"", dir).code, 0);
    const fs::path model = dir / "m.moescp";
    ASSERT_EQ(run_cli("train --config \"" + cfg.string() + "\" --steps 0 --out \"" + model.string() + "\"", dir).code, 0);
    const std::string bytes = slurp(model);
    std::ofstream(dir / "cut.moescp", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    const auto r = run_cli("analyze --model \"" + (dir / "cut.moescp").string() + "\" --config \"" + cfg.string() + "\"", dir);
    EXPECT_EQ(r.code, 4);
    EXPECT_NE(r.err.find("truncated"), std::string::npos);
}
