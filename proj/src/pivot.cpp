#include "ncl/pivot.hpp"

#include <cmath>

#include "ncl/rng.hpp"

namespace ncl::pivot {

using taxonomy::PatchLabel;

ContourFeatureSet aggregate_contour(const Tensor& block1_features,
                                    const taxonomy::PatchLabelMap& labels) {
  NCL_CHECK(block1_features.ndim() == 3, "aggregate_contour: features must be [C,H,W]");
  const int c = block1_features.dim(0);
  const int h = block1_features.dim(1);
  const int w = block1_features.dim(2);
  NCL_CHECK(h == labels.rows && w == labels.cols,
            "aggregate_contour: label grid and feature grid dims differ");

  std::vector<std::pair<int, int>> cells;
  for (int r = 0; r < h; ++r)
    for (int cc = 0; cc < w; ++cc)
      if (labels.at(r, cc) == PatchLabel::kContour) cells.emplace_back(r, cc);

  ContourFeatureSet out;
  out.features = Tensor({static_cast<int>(cells.size()), c});
  for (size_t j = 0; j < cells.size(); ++j) {
    const auto [r, cc] = cells[j];
    for (int ch = 0; ch < c; ++ch)
      out.features.at2(static_cast<int>(j), ch) =
          block1_features[(static_cast<int64_t>(ch) * h + r) * w + cc];
  }
  return out;
}

namespace {

BranchParams init_branch(int c, Rng& rng) {
  // symmetric uniform fan-in for the channel mixer, identity batch norm
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  Tensor w({c, c});
  for (int64_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-bound, bound);
  Tensor b({c});
  for (int64_t i = 0; i < b.numel(); ++i) b[i] = rng.uniform(-bound, bound);
  BranchParams p;
  p.weight = nn::param(std::move(w));
  p.bias = nn::param(std::move(b));
  p.gamma = nn::param(Tensor::full({c}, 1.0));
  p.beta = nn::param(Tensor({c}));
  p.running_mean = Tensor({c});
  p.running_var = Tensor::full({c}, 1.0);
  return p;
}

}  // namespace

PivotNet::PivotNet(int channels, uint64_t seed) : channels_(channels) {
  NCL_CHECK(channels >= 1, "PivotNet: channels must be positive");
  Rng rng_plus(seed_of(seed, 0x70u));
  Rng rng_minus(seed_of(seed, 0x71u));
  plus_ = init_branch(channels, rng_plus);
  minus_ = init_branch(channels, rng_minus);
}

nn::Var PivotNet::branch_forward(BranchParams& branch, const nn::Var& pooled,
                                 nn::BnMode mode) {
  nn::Var mixed = nn::linear(pooled, branch.weight, branch.bias);
  nn::Var normed = nn::batch_norm(mixed, branch.gamma, branch.beta, branch.running_mean,
                                  branch.running_var, mode);
  return nn::relu(normed);
}

std::optional<PivotPair> PivotNet::forward(const ContourFeatureSet& contours,
                                           bool train_solo) {
  if (contours.k() == 0) return std::nullopt;
  NCL_CHECK(contours.channels() == channels_, "PivotNet: channel mismatch");
  const nn::BnMode mode = train_solo ? nn::BnMode::kTrain : nn::BnMode::kEval;
  nn::Var feats = nn::constant(contours.features);
  nn::Var pooled = nn::mean_rows(feats);
  nn::Var sp = branch_forward(plus_, pooled, mode);
  nn::Var sm = branch_forward(minus_, pooled, mode);
  PivotPair pair;
  pair.se_plus = Tensor({channels_});
  pair.se_minus = Tensor({channels_});
  std::copy_n(sp->value.data(), channels_, pair.se_plus.data());
  std::copy_n(sm->value.data(), channels_, pair.se_minus.data());
  return pair;
}

Tensor PivotNet::input_grad(const ContourFeatureSet& contours, const Tensor& g_plus,
                            const Tensor& g_minus, bool train_solo) {
  NCL_CHECK(contours.k() >= 1, "PivotNet::input_grad: empty contour set");
  NCL_CHECK(g_plus.numel() == channels_ && g_minus.numel() == channels_,
            "PivotNet::input_grad: bad output grads");
  const nn::BnMode mode = train_solo ? nn::BnMode::kTrain : nn::BnMode::kEval;
  // Running stats must not drift from a gradient probe.
  Tensor rm_plus = plus_.running_mean, rv_plus = plus_.running_var;
  Tensor rm_minus = minus_.running_mean, rv_minus = minus_.running_var;

  nn::Var feats = nn::leaf(contours.features, true);
  nn::Var pooled = nn::mean_rows(feats);
  nn::Var sp = nn::relu(nn::batch_norm(nn::linear(pooled, plus_.weight, plus_.bias),
                                       plus_.gamma, plus_.beta, rm_plus, rv_plus, mode));
  nn::Var sm = nn::relu(nn::batch_norm(nn::linear(pooled, minus_.weight, minus_.bias),
                                       minus_.gamma, minus_.beta, rm_minus, rv_minus, mode));
  nn::Var root = nn::add_scalars({nn::dot_const(sp, g_plus), nn::dot_const(sm, g_minus)});
  for (auto& p : named_params()) nn::zero_grad(p.var);
  nn::backward(root);
  return feats->grad;
}

std::vector<nn::NamedParam> PivotNet::named_params() {
  return {
      {"pivot.plus.weight", plus_.weight, true},
      {"pivot.plus.bias", plus_.bias, false},
      {"pivot.plus.gamma", plus_.gamma, false},
      {"pivot.plus.beta", plus_.beta, false},
      {"pivot.minus.weight", minus_.weight, true},
      {"pivot.minus.bias", minus_.bias, false},
      {"pivot.minus.gamma", minus_.gamma, false},
      {"pivot.minus.beta", minus_.beta, false},
  };
}

std::vector<nn::NamedBuffer> PivotNet::named_buffers() {
  return {
      {"pivot.plus.running_mean", &plus_.running_mean},
      {"pivot.plus.running_var", &plus_.running_var},
      {"pivot.minus.running_mean", &minus_.running_mean},
      {"pivot.minus.running_var", &minus_.running_var},
  };
}

}  // namespace ncl::pivot
