#include "moelens/errors.hpp"
#include "moelens/trainer.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace moelens;
using moelens::testing::small_config;

namespace {

std::vector<DomainCorpus> corpora(std::size_t len = 4000) {
    return {synth_corpus("A", len, 3), synth_corpus("B", len, 3), synth_corpus("C", len, 3)};
}

std::vector<Sequence> small_batch(int seq_len = 8, int batch = 3) {
    TrainConfig tc;
    tc.seq_len = seq_len;
    tc.batch_size = batch;
    Prng rng(5);
    const auto cs = corpora(500);
    return sample_batch(cs, tc, 0, rng);
}

std::size_t offset_of(const Checkpoint& ck, const std::string& name) {
    std::size_t off = 0;
    for (const auto& e : tensor_directory(ck)) {
        if (e.name == name) return off;
        off += e.tensor->size();
    }
    throw std::runtime_error("no tensor " + name);
}

}  // namespace

TEST(CrossEntropy, Examples) {
    EXPECT_NEAR(cross_entropy_loss(Tensor::zeros({2, 258}), std::vector<int>{3, 9}), std::log(258.0), 1e-6);

    Tensor confident = Tensor::zeros({1, 4});
    confident[2] = 60.0f;
    EXPECT_NEAR(cross_entropy_loss(confident, std::vector<int>{2}), 0.0, 1e-6);

    const Tensor r = Tensor::matrix(1, 2, {0.0f, static_cast<float>(std::log(3.0))});
    EXPECT_NEAR(cross_entropy_loss(r, std::vector<int>{1}), 0.28768, 1e-5);
    EXPECT_THROW(cross_entropy_loss(r, std::vector<int>{1, 0}), DimensionError);
}

TEST(BalanceLoss, UniformCollapseAndHandCase) {
    RoutingStats uniform{4, 2, {}, {}};
    uniform.probs = {{.25, .25, .25, .25}, {.25, .25, .25, .25}};
    uniform.selected = {{0, 1}, {2, 3}};
    EXPECT_NEAR(balance_loss(uniform), 1.0, 1e-12);

    RoutingStats collapsed{8, 1, {}, {}};
    for (int t = 0; t < 5; ++t) {
        collapsed.probs.push_back({1, 0, 0, 0, 0, 0, 0, 0});
        collapsed.selected.push_back({0});
    }
    EXPECT_NEAR(balance_loss(collapsed), 8.0, 1e-12);

    RoutingStats hand{4, 2, {}, {}};
    hand.probs = {{.4, .3, .2, .1}, {.5, .3, .1, .1}};
    hand.selected = {{0, 1}, {0, 1}};
    // f = [0.5, 0.5, 0, 0], P = [0.45, 0.3, 0.15, 0.1]
    EXPECT_NEAR(balance_loss(hand), 1.5, 1e-12);
}

TEST(BalanceLoss, AtLeastOneOnRealRouting) {
    const Checkpoint ck = init_checkpoint(small_config());
    const auto cs = corpora(600);
    for (const auto& c : cs) {
        std::vector<int> window(c.tokens.begin(), c.tokens.begin() + 16);
        const auto trace = *model_forward(window, ck, true).trace;
        for (const auto& layer : trace.layers) EXPECT_GE(balance_loss(routing_stats(layer, 6, 3)), 1.0 - 1e-9);
    }
}

TEST(Corpus, DeterministicAndClosedOverAlphabet) {
    for (const auto& d : known_domains()) {
        const auto a = synth_corpus(d, 3000, 9), b = synth_corpus(d, 3000, 9), c = synth_corpus(d, 3000, 10);
        EXPECT_EQ(a.tokens, b.tokens);
        EXPECT_NE(a.tokens, c.tokens);
        EXPECT_EQ(a.tokens.size(), 3000u);
        const std::string alphabet = domain_alphabet(d);
        for (int t : a.tokens) ASSERT_NE(alphabet.find(static_cast<char>(t)), std::string::npos) << d << " " << t;
    }
    EXPECT_THROW(synth_corpus("Z", 10, 1), ParameterError);
    EXPECT_THROW(synth_corpus("A", 0, 1), ParameterError);
}

TEST(Corpus, DomainsHaveDistinctByteDistributions) {
    std::vector<std::map<int, double>> hist;
    for (const auto& d : known_domains()) {
        const auto c = synth_corpus(d, 20000, 1);
        std::map<int, double> h;
        for (int t : c.tokens) h[t] += 1.0 / static_cast<double>(c.tokens.size());
        hist.push_back(h);
    }
    for (std::size_t i = 0; i < hist.size(); ++i) {
        for (std::size_t j = i + 1; j < hist.size(); ++j) {
            double tv = 0.0;
            for (int b = 0; b < 256; ++b) {
                const double p = hist[i].count(b) ? hist[i].at(b) : 0.0;
                const double q = hist[j].count(b) ? hist[j].at(b) : 0.0;
                tv += std::abs(p - q);
            }
            EXPECT_GT(tv / 2.0, 0.5) << i << " vs " << j;
        }
    }
}

TEST(SampleBatch, ShapesAndShift) {
    const auto batch = small_batch(8, 4);
    ASSERT_EQ(batch.size(), 4u);
    for (const auto& s : batch) {
        ASSERT_EQ(s.inputs.size(), 8u);
        ASSERT_EQ(s.targets.size(), 8u);
        for (std::size_t t = 0; t + 1 < 8; ++t) EXPECT_EQ(s.inputs[t + 1], s.targets[t]);
    }
}

TEST(TrainingForward, MatchesModelForward) {
    const Checkpoint ck = init_checkpoint(small_config());
    const std::vector<int> tokens = moelens::testing::bytes_of("(A,[B]);x=1");
    const auto ref = model_forward(tokens, ck).logits;
    const auto got = training_logits(ck, tokens);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(got[i], ref[i], 1e-4) << i;
}

TEST(Train, ZeroStepsLeavesWeightsUntouched) {
    const Checkpoint ck = init_checkpoint(small_config());
    TrainConfig tc;
    tc.steps = 0;
    tc.seq_len = 8;
    const auto cs = corpora();
    const TrainResult r = train(ck, cs, tc);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(flatten_parameters(r.checkpoint), flatten_parameters(ck));
}

TEST(Train, LossDecreasesAndIsDeterministic) {
    const Checkpoint ck = init_checkpoint(small_config());
    TrainConfig tc;
    tc.steps = 200;
    tc.seq_len = 16;
    tc.batch_size = 3;
    const auto cs = corpora();
    const TrainResult a = train(ck, cs, tc);
    ASSERT_EQ(a.history.size(), 200u);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 20; ++i) {
        first += a.history[static_cast<std::size_t>(i)].cross_entropy;
        last += a.history[static_cast<std::size_t>(180 + i)].cross_entropy;
    }
    EXPECT_LT(last, first * 0.8);

    tc.steps = 20;
    const TrainResult b = train(ck, cs, tc), c = train(ck, cs, tc);
    EXPECT_EQ(flatten_parameters(b.checkpoint), flatten_parameters(c.checkpoint));
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(b.history[i].cross_entropy, a.history[i].cross_entropy);
}

TEST(Train, DivergenceIsReported) {
    TrainConfig tc;
    tc.steps = 50;
    tc.seq_len = 8;
    tc.learning_rate = 1e9;
    const auto cs = corpora();
    EXPECT_THROW(train(init_checkpoint(small_config()), cs, tc), DivergedError);
    tc.learning_rate = 0.0;
    EXPECT_THROW(tc.validate(), ParameterError);
}

TEST(GradCheck, FullModelWithinTolerance) {
    const Checkpoint ck = init_checkpoint(small_config());
    const auto batch = small_batch();
    GradCheckOptions opt;
    opt.samples = 100;
    const GradCheckReport r = grad_check(ck, batch, opt);
    EXPECT_EQ(r.entries.size(), 100u);
    EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradCheck, LinearSubPathIsExact) {
    const Checkpoint ck = init_checkpoint(small_config());
    const auto batch = small_batch();
    GradCheckOptions opt;
    opt.samples = 50;
    opt.objective = Objective::LinearProbe;
    opt.tensor_prefix = "unembedding";
    const GradCheckReport r = grad_check(ck, batch, opt);
    ASSERT_EQ(r.entries.size(), 50u);
    for (const auto& e : r.entries) EXPECT_EQ(e.tensor, "unembedding");
    EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(GradCheck, UnselectedExpertGetsExactlyZeroGradient) {
    ModelConfig c = small_config();
    c.n_routed_experts = 8;
    c.top_k = 1;
    const Checkpoint ck = init_checkpoint(c);
    const std::vector<Sequence> batch{{{65, 66, 67, 68}, {66, 67, 68, 69}}};
    const auto params = flatten_parameters(ck);
    const auto ev = evaluate_batch(ck, params, batch, Objective::CrossEntropy, 0.01, true);

    const auto trace = *model_forward(batch[0].inputs, ck, true).trace;
    int checked = 0;
    for (int l = 0; l < c.n_layers; ++l) {
        std::vector<bool> used(8, false);
        for (const auto& tok : trace.layers[static_cast<std::size_t>(l)].tokens) used[static_cast<std::size_t>(tok.selected[0])] = true;
        for (int e = 0; e < 8; ++e) {
            const std::string base = "layers." + std::to_string(l) + ".experts." + std::to_string(e) + ".";
            bool any_nonzero = false;
            for (const char* part : {"w_in", "w_out"}) {
                const std::size_t off = offset_of(ck, base + part);
                const std::size_t len = part[2] == 'i' ? 16u * 8u : 8u * 16u;
                for (std::size_t i = 0; i < len; ++i) any_nonzero |= ev.gradient[off + i] != 0.0;
            }
            if (!used[static_cast<std::size_t>(e)]) {
                EXPECT_FALSE(any_nonzero) << base;
                ++checked;
            } else {
                EXPECT_TRUE(any_nonzero) << base;
            }
        }
    }
    EXPECT_GE(checked, 8);
}

TEST(GradCheck, RejectsPrunedCheckpoint) {
    Checkpoint ck = init_checkpoint(small_config());
    ck.layers[0].expert_ids = {0, 1, 2};
    ck.layers[0].experts.resize(3);
    EXPECT_THROW(grad_check(ck, small_batch(), {}), ParameterError);
}
