#pragma once

#include <optional>
#include <vector>

#include "ncl/losses.hpp"
#include "ncl/nn.hpp"
#include "ncl/taxonomy.hpp"

namespace ncl::pivot {

using losses::PivotPair;

// All contour-cell feature vectors of one image, row-major cell order.
struct ContourFeatureSet {
  Tensor features;  // [k, C]
  int k() const { return features.empty() ? 0 : features.dim(0); }
  int channels() const { return features.empty() ? 0 : features.dim(1); }
};

// Collect the feature vectors at CONTOUR grid positions. The feature grid
// and label grid must share spatial dims.
ContourFeatureSet aggregate_contour(const Tensor& block1_features /* [C,H,W] */,
                                    const taxonomy::PatchLabelMap& labels);

// One branch: channel-mixing 1x1 convolution (a CxC mix), batch norm, ReLU.
struct BranchParams {
  nn::Var weight;  // [C, C]
  nn::Var bias;    // [C]
  nn::Var gamma;   // [C]
  nn::Var beta;    // [C]
  Tensor running_mean;
  Tensor running_var;
};

// Two symmetrical branches with independent parameters mapping the pooled
// contour embedding to the hard-positive / hard-negative outputs.
class PivotNet {
 public:
  PivotNet(int channels, uint64_t seed);

  int channels() const { return channels_; }
  BranchParams& plus() { return plus_; }
  BranchParams& minus() { return minus_; }

  // Branch pipeline on pooled rows [B, C]; BnMode::kTrain uses batch
  // statistics across the rows (affine-only when B == 1).
  nn::Var branch_forward(BranchParams& branch, const nn::Var& pooled, nn::BnMode mode);

  // Per-image forward: mean-pool over k, then both branches.
  // Returns nullopt when k == 0 so the caller skips the pivot loss terms.
  // `train_solo` selects per-call batch statistics (degrading to
  // affine-only for the single vector); otherwise running stats are used.
  std::optional<PivotPair> forward(const ContourFeatureSet& contours, bool train_solo = false);

  // d(<g_plus, se+> + <g_minus, se->)/d(features); same modes as forward().
  Tensor input_grad(const ContourFeatureSet& contours, const Tensor& g_plus,
                    const Tensor& g_minus, bool train_solo = false);

  std::vector<nn::NamedParam> named_params();
  std::vector<nn::NamedBuffer> named_buffers();

 private:
  int channels_;
  BranchParams plus_, minus_;
};

}  // namespace ncl::pivot
