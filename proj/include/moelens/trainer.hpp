#pragma once

#include "moelens/corpus.hpp"
#include "moelens/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace moelens {

struct TrainConfig {
    double learning_rate = 0.05;
    int steps = 2000;
    int batch_size = 4;
    int seq_len = 32;
    double balance_coeff = 0.01;
    std::uint64_t seed = 7;

    void validate() const;
};

/// Mean over positions of -log softmax(logits)[target], via log-sum-exp.
double cross_entropy_loss(const Tensor& logits, std::span<const int> targets);

/// Per-token routing of one layer: full distributions and top-k selections.
struct RoutingStats {
    int n_experts = 0;
    int top_k = 0;
    std::vector<std::vector<double>> probs;
    std::vector<std::vector<int>> selected;
};

RoutingStats routing_stats(const LayerTrace& layer, int n_experts, int top_k);

/// Expert-level balance loss n * sum_i f_i * P_i, with f_i the share of
/// tokens selecting expert i divided by k and P_i its mean probability.
/// Equals 1 for exactly uniform routing.
double balance_loss(const RoutingStats& stats);

struct Sequence {
    std::vector<int> inputs;
    std::vector<int> targets;
};

/// Batch for `step`: domains interleave round-robin across the batch slots,
/// window offsets come from `rng`.
std::vector<Sequence> sample_batch(std::span<const DomainCorpus> corpora, const TrainConfig& config, int step,
                                   Prng& rng);

struct TrainStep {
    int step = 0;
    double cross_entropy = 0.0;
    double balance_loss = 0.0;  // mean over layers, before scaling by the coefficient
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<TrainStep> history;
};

/// Plain SGD on cross_entropy + balance_coeff * mean-over-layers balance loss.
/// Throws DivergedError if the loss stops being finite.
TrainResult train(const Checkpoint& initial, std::span<const DomainCorpus> corpora, const TrainConfig& config,
                  const std::function<void(const TrainStep&)>& on_step = {});

// Differentiable evaluation over a flat double parameter vector laid out in
// tensor_directory order. train() and grad_check() are both built on it.

enum class Objective {
    CrossEntropy,  // cross entropy + coefficient * mean balance loss
    LinearProbe,   // mean of logits weighted by a fixed random projection; linear in the unembedding
};

struct BatchEvaluation {
    double cross_entropy = 0.0;
    double balance = 0.0;
    double objective = 0.0;
    std::vector<double> gradient;    // empty unless requested
    std::vector<int> selection_key;  // every routed selection, in order
};

std::vector<double> flatten_parameters(const Checkpoint& checkpoint);
void assign_parameters(Checkpoint& checkpoint, std::span<const double> params);

BatchEvaluation evaluate_batch(const Checkpoint& layout, std::span<const double> params,
                               std::span<const Sequence> batch, Objective objective, double balance_coeff,
                               bool want_gradient, std::uint64_t probe_seed = 0);

/// Logits (T x vocab) of the double-precision training forward pass.
std::vector<double> training_logits(const Checkpoint& checkpoint, std::span<const int> inputs);

struct GradCheckOptions {
    int samples = 100;
    double step = 1e-3;
    Objective objective = Objective::CrossEntropy;
    double balance_coeff = 0.01;
    std::uint64_t seed = 11;
    /// Only sample parameters whose tensor name starts with this prefix.
    std::string tensor_prefix;
};

struct GradCheckEntry {
    std::string tensor;
    std::size_t index = 0;  // flat parameter index
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<GradCheckEntry> entries;
    /// Samples discarded because a +/- step changed some top-k selection.
    int skipped = 0;
};

/// Compares the analytic gradient with central differences in double.
/// Selections are held fixed, so samples whose perturbation flips a routing
/// decision are redrawn.
GradCheckReport grad_check(const Checkpoint& checkpoint, std::span<const Sequence> batch,
                           const GradCheckOptions& options);

}  // namespace moelens
