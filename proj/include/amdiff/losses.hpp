#pragma once

#include <span>
#include <vector>

#include "amdiff/nn.hpp"
#include "amdiff/volume.hpp"

namespace amdiff {

/// Per-class loss weights w[0..S]; w[0] is background, w[1] the lesion.
struct ClassWeights {
    std::vector<double> w;

    static ClassWeights defaults(int num_classes);  // 0.1 background, 4.0 lesion, 1.0 organs
    void validate(int num_classes) const;
};

struct LossReport {
    double diff = 0.0;
    double lor = 0.0;
    double rev = 0.0;
    double seg = 0.0;
    double lambda_warm = 0.0;
    double total = 0.0;
};

// ---- plain evaluations ----

/// Mean absolute error over all elements.
double diff_loss(std::span<const double> eps_hat, std::span<const double> eps);

/// sum(mask*|pred - ref|)/max(sum(mask), 1); empty mask gives 0.
double masked_l1(std::span<const double> pred, std::span<const double> ref,
                 std::span<const double> mask);

/// Class-weighted masked L1 over classes 1..S (background excluded).
double lor_loss(const Volume3D& pred_suv, const Volume3D& ref_suv, const LabelVolume& labels,
                const ClassWeights& weights);

/// As lor_loss but summing classes 0..S (background included).
double rev_loss(const Volume3D& pred_suv, const Volume3D& ref_suv, const LabelVolume& labels,
                const ClassWeights& weights);

/// Per-class binary cross-entropy plus focal Dice, averaged as
/// (1/S) * sum_{s=1..S} w[s]*(CE_s + FD_s). lesion_probs holds the 2-channel
/// lesion head softmax (channel 1 = lesion); organ_probs the (S)-channel organ
/// head softmax over [background, organ 2, ..., organ S].
double seg_loss(std::span<const double> lesion_probs, std::span<const double> organ_probs,
                const LabelVolume& labels, const ClassWeights& weights);

/// exp(-5*(1 - e/e_max)^2) for completed-epoch index e in [0, e_max].
double warmup_weight(int e, int e_max);

/// total = diff + lambda_warm*(lor + rev + seg); throws NumericError on non-finite parts.
LossReport total_loss(double diff, double lor, double rev, double seg, double lambda_warm);

// ---- tape builders (same formulas, differentiable) ----

nn::Var diff_loss_node(nn::Graph& g, const nn::Var& eps_hat, const nn::Var& eps);
nn::Var masked_l1_node(nn::Graph& g, const nn::Var& pred, const nn::Var& ref,
                       const nn::Var& mask);
nn::Var lor_loss_node(nn::Graph& g, const nn::Var& pred_suv, const std::vector<float>& ref_suv,
                      const LabelVolume& labels, const ClassWeights& weights);
nn::Var rev_loss_node(nn::Graph& g, const nn::Var& pred_suv, const std::vector<float>& ref_suv,
                      const LabelVolume& labels, const ClassWeights& weights);
/// Takes softmaxed per-head probabilities shaped {2, D, H, W} and {S, D, H, W}.
nn::Var seg_loss_node(nn::Graph& g, const nn::Var& lesion_probs, const nn::Var& organ_probs,
                      const LabelVolume& labels, const ClassWeights& weights);

}  // namespace amdiff
