#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "ncl/tensor.hpp"

namespace ncl::nn {

// Reverse-mode tape node. Graphs are built per forward pass; parameters are
// long-lived leaves whose grads the optimizer consumes.
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // accumulates into parents' grads

  Tensor& ensure_grad() {
    if (!grad.same_shape(value)) grad = Tensor(value.shape());
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor value, bool requires_grad = false);
inline Var param(Tensor value) { return leaf(std::move(value), true); }
inline Var constant(Tensor value) { return leaf(std::move(value), false); }

// Seeds d(root)/d(root) = 1 and runs the tape in reverse topological order.
void backward(const Var& root);

void zero_grad(const Var& v);

// ---- elementwise / structural ops ----
Var add(const Var& a, const Var& b);           // same shape
Var scale(const Var& a, double c);
Var add_scalars(const std::vector<Var>& xs);   // sum of [1] tensors -> [1]
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var concat_channels(const Var& a, const Var& b);  // [N,Ca,H,W] + [N,Cb,H,W]

// ---- dense / conv ----
// y[b,o] = sum_i x[b,i] * w[o,i] + bias[o]
Var linear(const Var& x, const Var& w, const Var& bias);

// Standard 2-d convolution, NCHW, square padding/stride/dilation.
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad, int dilation = 1);

enum class BnMode { kTrain, kEval };

// Batch norm over N*H*W per channel ([N,C,H,W]) or over rows ([B,C]).
// Training mode with a single row in the 2-d case degrades to affine-only.
// running_mean / running_var are plain tensors owned by the caller and are
// updated in place during training.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, BnMode mode, double momentum = 0.1, double eps = 1e-5);

// Bilinear resize (align_corners=false) of [N,C,H,W] to (out_h, out_w).
Var upsample_bilinear(const Var& x, int out_h, int out_w);

// Rows [k, C]: out[j, c] = x[n, c, cells[j].first, cells[j].second]
Var gather_cells(const Var& x, int n, const std::vector<std::pair<int, int>>& cells);

// [k, C] -> [1, C]
Var mean_rows(const Var& x);

// stack B vars of shape [1, C] into [B, C]
Var stack_rows(const std::vector<Var>& rows);

// [B, C] -> [1, C] (row b)
Var take_row(const Var& x, int b);

// scalar = sum_i x[i] * w[i]; w is a constant
Var dot_const(const Var& x, Tensor w);

bool all_finite(const Tensor& t);

// Checkpoint / optimizer plumbing: modules expose their learnables and
// running-stat buffers under stable names.
struct NamedParam {
  std::string name;
  Var var;
  bool decay = true;  // weight decay applies (false for norm affine and biases)
};
struct NamedBuffer {
  std::string name;
  Tensor* tensor;
};

}  // namespace ncl::nn
