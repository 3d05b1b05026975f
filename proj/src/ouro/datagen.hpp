#pragma once

#include <cstdint>
#include <vector>

#include "ouro/attention.hpp"
#include "ouro/ssm.hpp"

namespace ouro {

struct GenSettings {
    std::size_t iterations = 200;
    std::size_t batch = 8;
    std::size_t neighborhood = 5;  // pair-plane window side, odd
    std::size_t positives = 0;     // per-anchor positive count; 0 = half the window
    std::size_t anchor_stride = 1; // keep every stride-th causal anchor
    double temperature = 0.07;
    double step_size = 0.05;
    bool uniform_weighting = false;  // aggregation weights 1 instead of mean delta

    void validate() const;
};

struct PairIndex {
    std::size_t x = 0, y = 0;  // coordinates in the M x M pair plane
};

struct ContrastiveSelection {
    std::vector<PairIndex> positives;
    std::vector<PairIndex> negatives;
};

// Rank the in-window neighbors of `anchor` by cosine similarity between their
// N-dim embeddings and the anchor's, descending, ties broken by row-major
// index; the top entries become positives, the rest negatives. `lambda` is an
// M x M x N embedding plane. A zero-norm anchor is an error; zero-norm
// neighbors rank last. n_pos = 0 picks floor(|window cells in bounds| / 2).
ContrastiveSelection select_pos_neg(const std::vector<double>& lambda, std::size_t m,
                                    std::size_t n, PairIndex anchor, std::size_t window,
                                    std::size_t n_pos);

// InfoNCE-style loss over raw embedding dot products at temperature tau:
// -log( sum_pos exp(d+/tau) / (sum_pos exp(d+/tau) + sum_neg exp(d-/tau)) ).
// Empty positive or negative sets are an error.
double contrastive_loss(const std::vector<double>& lambda, std::size_t m, std::size_t n,
                        PairIndex anchor, const ContrastiveSelection& sel, double tau);

// Per-row Dirichlet(1) draws: uniform over the probability simplex.
Tensor make_targets(std::size_t batch, std::size_t classes, SeededRng& rng);
// Standard Gaussian pixel noise, B x pix.
Tensor init_noise_batch(std::size_t batch, std::size_t pix, SeededRng& rng);

// Mean absolute deviation between softmax(logits) and the target rows.
Tensor output_loss(const Tensor& logits, const Tensor& targets);

// One evaluation of the generation objective on an image batch: the summed
// contrastive terms over every scan plus the output loss against `targets`.
struct GenLossParts {
    Tensor total;    // scalar
    Tensor watched;  // images as the tape saw them (== images when tape is null)
    double contrastive = 0.0;
    double output = 0.0;
};

// When `tape` is non-null the images are registered on it, so after
// tape.backward(parts.total) the gradient is tape.grad_of(parts.watched).
GenLossParts gen_loss(const ToyVmmModel& model, const GenSettings& gs, const Tensor& images,
                      const Tensor& targets, Tape* tape);

struct GenResult {
    Tensor images;   // B x pix, the optimized batch
    Tensor targets;  // B x classes
    // One entry per iteration, measured before that iteration's update.
    std::vector<double> loss_history;
    std::vector<double> contrastive_history;
    std::vector<double> output_history;
};

// Optimizes a noise batch so the model's enhanced-attention embeddings become
// locally discriminative while the head matches random soft targets. Plain
// gradient descent with a constant step. Throws NumericError if the loss
// leaves the finite range.
GenResult generate(const ToyVmmModel& model, const GenSettings& gs, std::uint64_t seed);

}  // namespace ouro
