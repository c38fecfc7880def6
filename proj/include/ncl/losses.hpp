#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ncl/taxonomy.hpp"
#include "ncl/tensor.hpp"

namespace ncl::losses {

// Hard-positive / hard-negative embeddings produced by the pivot network
// from one image's aggregated contour features.
struct PivotPair {
  Tensor se_plus;   // [C]
  Tensor se_minus;  // [C]
};

// One image's contrastive inputs: features of fully tampered cells (pos),
// fully authentic cells (neg), and optionally the pivot outputs.
struct ContrastBatch {
  Tensor pos;  // [m, C]
  Tensor neg;  // [n, C]
  std::optional<PivotPair> pivot;
  double tau = 0.1;
};

// Cosine similarity with epsilon-stabilized norms; smooth at zero vectors.
double similarity(std::span<const double> a, std::span<const double> b);

// Contrastive loss over the three pairwise contrasts
//   {pos, neg}, {pos vs hard negative}, {neg vs hard positive},
// in minimization form (negated log-softmax ratios, averaged per term).
// Terms whose index sets are empty contribute zero. The positive set paired
// against the hard-negative branch excludes the designated anchor positive;
// the exclusion is averaged over all anchor choices so the result is
// permutation invariant.
double ncl_loss(const ContrastBatch& batch);

struct NclGrads {
  double value = 0.0;
  Tensor d_pos;       // [m, C]
  Tensor d_neg;       // [n, C]
  Tensor d_se_plus;   // [C] (empty when no pivot)
  Tensor d_se_minus;  // [C]
};
NclGrads ncl_loss_grad(const ContrastBatch& batch);

// One auxiliary-classifier supervision point: predicted probabilities,
// ground truth shrunk to the same grid, and the contour-pixel membership map.
struct PCStage {
  Tensor probs;                 // [h, w], values in [0, 1]
  taxonomy::TamperMask gt;      // h x w binary
  taxonomy::TamperMask contour; // h x w binary, 1 = contour pixel
};

inline constexpr double kProbEps = 1e-7;  // clamp for probabilities before logs

struct PcResult {
  double total = 0.0;
  std::vector<double> per_stage;
};

// Weighted BCE per stage: mu-weighted mean over contour pixels plus
// (1-mu)-weighted mean over all pixels; stages are summed.
PcResult pc_loss(std::span<const PCStage> stages, double mu);

struct PcGrads {
  PcResult result;
  std::vector<Tensor> d_probs;  // one [h, w] per stage
};
PcGrads pc_loss_grad(std::span<const PCStage> stages, double mu);

// Hybrid total: omega * ncl + pc.
double total_loss(double ncl, double pc, double omega);

// One training step's scalar summary; serializes as
// "step,ncl,pc,total,m,n,k" in the training log.
struct LossBreakdown {
  double ncl = 0.0;
  double pc = 0.0;
  std::vector<double> pc_per_stage;
  double total = 0.0;
  int64_t m = 0, n = 0, k = 0;
};

}  // namespace ncl::losses
