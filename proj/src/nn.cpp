#include "ncl/nn.hpp"

#include <Eigen/Core>

#include <cmath>
#include <unordered_set>

namespace ncl::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  bool needs = false;
  for (const auto& p : n->parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) n->backward_fn = std::move(bw);
  return n;
}

}  // namespace

Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

void zero_grad(const Var& v) {
  if (v->grad.same_shape(v->value))
    v->grad.fill(0.0);
  else
    v->grad = Tensor(v->value.shape());
}

void backward(const Var& root) {
  NCL_CHECK(root->value.numel() == 1, "backward expects a scalar root");
  // iterative post-order DFS; reverse gives a valid topological order
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->ensure_grad().fill(0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) return false;
  return true;
}

Var add(const Var& a, const Var& b) {
  NCL_CHECK(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor y = a->value;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += b->value[i];
  return make_node(std::move(y), {a, b}, [](Node& n) {
    for (int pi = 0; pi < 2; ++pi) {
      Var& p = n.parents[pi];
      if (!p->requires_grad) continue;
      Tensor& g = p->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor y = a->value;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] *= c;
  return make_node(std::move(y), {a}, [c](Node& n) {
    Var& p = n.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += c * n.grad[i];
  });
}

Var add_scalars(const std::vector<Var>& xs) {
  NCL_CHECK(!xs.empty(), "add_scalars: empty input");
  double s = 0.0;
  for (const auto& x : xs) {
    NCL_CHECK(x->value.numel() == 1, "add_scalars: inputs must be scalars");
    s += x->value[0];
  }
  return make_node(Tensor::scalar(s), xs, [](Node& n) {
    for (auto& p : n.parents)
      if (p->requires_grad) p->ensure_grad()[0] += n.grad[0];
  });
}

Var relu(const Var& x) {
  Tensor y = x->value;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
  return make_node(std::move(y), {x}, [](Node& n) {
    Var& p = n.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (n.value[i] > 0.0) g[i] += n.grad[i];
  });
}

Var sigmoid(const Var& x) {
  Tensor y = x->value;
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-y[i]));
  return make_node(std::move(y), {x}, [](Node& n) {
    Var& p = n.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * n.value[i] * (1.0 - n.value[i]);
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const auto& sa = a->value.shape();
  const auto& sb = b->value.shape();
  NCL_CHECK(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] &&
                sa[3] == sb[3],
            "concat_channels: incompatible shapes");
  const int n = sa[0], ca = sa[1], cb = sb[1], h = sa[2], w = sa[3];
  const int64_t plane = static_cast<int64_t>(h) * w;
  Tensor y({n, ca + cb, h, w});
  for (int b0 = 0; b0 < n; ++b0) {
    std::copy_n(a->value.data() + b0 * ca * plane, ca * plane,
                y.data() + b0 * (ca + cb) * plane);
    std::copy_n(b->value.data() + b0 * cb * plane, cb * plane,
                y.data() + (b0 * (ca + cb) + ca) * plane);
  }
  return make_node(std::move(y), {a, b}, [n, ca, cb, plane](Node& nd) {
    for (int b0 = 0; b0 < n; ++b0) {
      if (nd.parents[0]->requires_grad) {
        Tensor& g = nd.parents[0]->ensure_grad();
        const double* src = nd.grad.data() + b0 * (ca + cb) * plane;
        double* dst = g.data() + b0 * ca * plane;
        for (int64_t i = 0; i < ca * plane; ++i) dst[i] += src[i];
      }
      if (nd.parents[1]->requires_grad) {
        Tensor& g = nd.parents[1]->ensure_grad();
        const double* src = nd.grad.data() + (b0 * (ca + cb) + ca) * plane;
        double* dst = g.data() + b0 * cb * plane;
        for (int64_t i = 0; i < cb * plane; ++i) dst[i] += src[i];
      }
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  const auto& sx = x->value.shape();
  const auto& sw = w->value.shape();
  NCL_CHECK(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1], "linear: shape mismatch");
  const int b = sx[0], ci = sx[1], co = sw[0];
  NCL_CHECK(bias->value.numel() == co, "linear: bias size mismatch");
  Tensor y({b, co});
  MapConstMat X(x->value.data(), b, ci), W(w->value.data(), co, ci);
  MapMat Y(y.data(), b, co);
  Y.noalias() = X * W.transpose();
  for (int r = 0; r < b; ++r)
    for (int o = 0; o < co; ++o) y.at2(r, o) += bias->value[o];
  return make_node(std::move(y), {x, w, bias}, [b, ci, co](Node& n) {
    MapConstMat dY(n.grad.data(), b, co);
    MapConstMat X(n.parents[0]->value.data(), b, ci);
    MapConstMat W(n.parents[1]->value.data(), co, ci);
    if (n.parents[0]->requires_grad) {
      MapMat dX(n.parents[0]->ensure_grad().data(), b, ci);
      dX.noalias() += dY * W;
    }
    if (n.parents[1]->requires_grad) {
      MapMat dW(n.parents[1]->ensure_grad().data(), co, ci);
      dW.noalias() += dY.transpose() * X;
    }
    if (n.parents[2]->requires_grad) {
      Tensor& db = n.parents[2]->ensure_grad();
      for (int r = 0; r < b; ++r)
        for (int o = 0; o < co; ++o) db[o] += dY(r, o);
    }
  });
}

namespace {

struct ConvDims {
  int n, ci, h, w, co, kh, kw, ho, wo, stride, pad, dil;
  int64_t k() const { return static_cast<int64_t>(ci) * kh * kw; }
  int64_t cols() const { return static_cast<int64_t>(ho) * wo; }
};

void im2col(const double* x, const ConvDims& d, double* col) {
  // col is [ci*kh*kw, ho*wo] for one sample
  for (int c = 0; c < d.ci; ++c) {
    const double* plane = x + static_cast<int64_t>(c) * d.h * d.w;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        double* row = col + ((static_cast<int64_t>(c) * d.kh + ky) * d.kw + kx) * d.cols();
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * d.stride - d.pad + ky * d.dil;
          if (iy < 0 || iy >= d.h) {
            std::fill_n(row + static_cast<int64_t>(oy) * d.wo, d.wo, 0.0);
            continue;
          }
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * d.stride - d.pad + kx * d.dil;
            row[static_cast<int64_t>(oy) * d.wo + ox] =
                (ix < 0 || ix >= d.w) ? 0.0 : plane[static_cast<int64_t>(iy) * d.w + ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* dx) {
  for (int c = 0; c < d.ci; ++c) {
    double* plane = dx + static_cast<int64_t>(c) * d.h * d.w;
    for (int ky = 0; ky < d.kh; ++ky) {
      for (int kx = 0; kx < d.kw; ++kx) {
        const double* row =
            col + ((static_cast<int64_t>(c) * d.kh + ky) * d.kw + kx) * d.cols();
        for (int oy = 0; oy < d.ho; ++oy) {
          const int iy = oy * d.stride - d.pad + ky * d.dil;
          if (iy < 0 || iy >= d.h) continue;
          for (int ox = 0; ox < d.wo; ++ox) {
            const int ix = ox * d.stride - d.pad + kx * d.dil;
            if (ix < 0 || ix >= d.w) continue;
            plane[static_cast<int64_t>(iy) * d.w + ix] +=
                row[static_cast<int64_t>(oy) * d.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad, int dilation) {
  const auto& sx = x->value.shape();
  const auto& sw = w->value.shape();
  NCL_CHECK(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1], "conv2d: shape mismatch");
  ConvDims d;
  d.n = sx[0];
  d.ci = sx[1];
  d.h = sx[2];
  d.w = sx[3];
  d.co = sw[0];
  d.kh = sw[2];
  d.kw = sw[3];
  d.stride = stride;
  d.pad = pad;
  d.dil = dilation;
  d.ho = (d.h + 2 * pad - dilation * (d.kh - 1) - 1) / stride + 1;
  d.wo = (d.w + 2 * pad - dilation * (d.kw - 1) - 1) / stride + 1;
  NCL_CHECK(d.ho > 0 && d.wo > 0, "conv2d: empty output");
  NCL_CHECK(bias->value.numel() == d.co, "conv2d: bias size mismatch");

  Tensor y({d.n, d.co, d.ho, d.wo});
  std::vector<double> col(static_cast<size_t>(d.k()) * d.cols());
  MapConstMat W(w->value.data(), d.co, static_cast<int>(d.k()));
  for (int b = 0; b < d.n; ++b) {
    im2col(x->value.data() + static_cast<int64_t>(b) * d.ci * d.h * d.w, d, col.data());
    MapConstMat C(col.data(), static_cast<int>(d.k()), static_cast<int>(d.cols()));
    MapMat Y(y.data() + static_cast<int64_t>(b) * d.co * d.cols(), d.co,
             static_cast<int>(d.cols()));
    Y.noalias() = W * C;
    for (int o = 0; o < d.co; ++o) {
      double* row = y.data() + (static_cast<int64_t>(b) * d.co + o) * d.cols();
      const double bv = bias->value[o];
      for (int64_t i = 0; i < d.cols(); ++i) row[i] += bv;
    }
  }

  // im2col is recomputed in the backward pass instead of cached: keeps peak
  // memory flat when graphs are deep.
  return make_node(std::move(y), {x, w, bias}, [d](Node& n) {
    std::vector<double> col(static_cast<size_t>(d.k()) * d.cols());
    std::vector<double> dcol(static_cast<size_t>(d.k()) * d.cols());
    MapConstMat W(n.parents[1]->value.data(), d.co, static_cast<int>(d.k()));
    for (int b = 0; b < d.n; ++b) {
      MapConstMat dY(n.grad.data() + static_cast<int64_t>(b) * d.co * d.cols(), d.co,
                     static_cast<int>(d.cols()));
      const bool need_dw = n.parents[1]->requires_grad;
      const bool need_dx = n.parents[0]->requires_grad;
      if (need_dw || need_dx) {
        im2col(n.parents[0]->value.data() + static_cast<int64_t>(b) * d.ci * d.h * d.w, d,
               col.data());
      }
      if (need_dw) {
        MapConstMat C(col.data(), static_cast<int>(d.k()), static_cast<int>(d.cols()));
        MapMat dW(n.parents[1]->ensure_grad().data(), d.co, static_cast<int>(d.k()));
        dW.noalias() += dY * C.transpose();
      }
      if (need_dx) {
        MapMat dC(dcol.data(), static_cast<int>(d.k()), static_cast<int>(d.cols()));
        dC.noalias() = W.transpose() * dY;
        col2im_add(dcol.data(), d,
                   n.parents[0]->ensure_grad().data() +
                       static_cast<int64_t>(b) * d.ci * d.h * d.w);
      }
      if (n.parents[2]->requires_grad) {
        Tensor& db = n.parents[2]->ensure_grad();
        for (int o = 0; o < d.co; ++o) {
          const double* row = n.grad.data() + (static_cast<int64_t>(b) * d.co + o) * d.cols();
          double s = 0.0;
          for (int64_t i = 0; i < d.cols(); ++i) s += row[i];
          db[o] += s;
        }
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, BnMode mode, double momentum, double eps) {
  const auto& s = x->value.shape();
  NCL_CHECK(s.size() == 4 || s.size() == 2, "batch_norm: expects [N,C,H,W] or [B,C]");
  const int c = s[1];
  NCL_CHECK(gamma->value.numel() == c && beta->value.numel() == c &&
                running_mean.numel() == c && running_var.numel() == c,
            "batch_norm: channel mismatch");

  const int n = s[0];
  const int64_t plane = s.size() == 4 ? static_cast<int64_t>(s[2]) * s[3] : 1;
  const int64_t reduce = static_cast<int64_t>(n) * plane;

  // Affine-only degradation: with one sample and no spatial extent there is
  // no batch statistic to normalize with.
  const bool affine_only = (mode == BnMode::kTrain && reduce == 1);

  Tensor y(x->value.shape());
  Tensor xhat;       // cached for backward in train mode
  Tensor inv_std_t;  // [C]
  std::vector<double> mean_v(static_cast<size_t>(c), 0.0);
  std::vector<double> var_v(static_cast<size_t>(c), 0.0);

  // by-value capture: this helper outlives the enclosing call inside the
  // backward closures
  auto channel_ptr = [c, plane](const Tensor& t, int b, int ch) {
    return t.data() + (static_cast<int64_t>(b) * c + ch) * plane;
  };

  if (affine_only) {
    for (int ch = 0; ch < c; ++ch) {
      const double g = gamma->value[ch], bta = beta->value[ch];
      for (int b = 0; b < n; ++b) {
        const double* px = channel_ptr(x->value, b, ch);
        double* py = const_cast<double*>(channel_ptr(y, b, ch));
        for (int64_t i = 0; i < plane; ++i) py[i] = g * px[i] + bta;
      }
    }
    return make_node(std::move(y), {x, gamma, beta}, [c, n, plane, channel_ptr](Node& nd) {
      for (int ch = 0; ch < c; ++ch) {
        const double g = nd.parents[1]->value[ch];
        double dg = 0.0, db = 0.0;
        for (int b = 0; b < n; ++b) {
          const double* pdy = channel_ptr(nd.grad, b, ch);
          const double* px = channel_ptr(nd.parents[0]->value, b, ch);
          for (int64_t i = 0; i < plane; ++i) {
            dg += pdy[i] * px[i];
            db += pdy[i];
          }
          if (nd.parents[0]->requires_grad) {
            double* pdx = const_cast<double*>(channel_ptr(nd.parents[0]->ensure_grad(), b, ch));
            for (int64_t i = 0; i < plane; ++i) pdx[i] += g * pdy[i];
          }
        }
        if (nd.parents[1]->requires_grad) nd.parents[1]->ensure_grad()[ch] += dg;
        if (nd.parents[2]->requires_grad) nd.parents[2]->ensure_grad()[ch] += db;
      }
    });
  }

  if (mode == BnMode::kTrain) {
    for (int ch = 0; ch < c; ++ch) {
      double s1 = 0.0, s2 = 0.0;
      for (int b = 0; b < n; ++b) {
        const double* px = channel_ptr(x->value, b, ch);
        for (int64_t i = 0; i < plane; ++i) {
          s1 += px[i];
          s2 += px[i] * px[i];
        }
      }
      const double mean = s1 / static_cast<double>(reduce);
      const double var = s2 / static_cast<double>(reduce) - mean * mean;  // biased
      mean_v[static_cast<size_t>(ch)] = mean;
      var_v[static_cast<size_t>(ch)] = var < 0.0 ? 0.0 : var;
      // running stats keep the unbiased variance
      const double unbiased =
          reduce > 1 ? var_v[static_cast<size_t>(ch)] * reduce / (reduce - 1.0) : 0.0;
      running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean;
      running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * unbiased;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean_v[static_cast<size_t>(ch)] = running_mean[ch];
      var_v[static_cast<size_t>(ch)] = running_var[ch];
    }
  }

  xhat = Tensor(x->value.shape());
  inv_std_t = Tensor({c});
  for (int ch = 0; ch < c; ++ch) {
    const double inv = 1.0 / std::sqrt(var_v[static_cast<size_t>(ch)] + eps);
    inv_std_t[ch] = inv;
    const double m = mean_v[static_cast<size_t>(ch)];
    const double g = gamma->value[ch], bta = beta->value[ch];
    for (int b = 0; b < n; ++b) {
      const double* px = channel_ptr(x->value, b, ch);
      double* ph = const_cast<double*>(channel_ptr(xhat, b, ch));
      double* py = const_cast<double*>(channel_ptr(y, b, ch));
      for (int64_t i = 0; i < plane; ++i) {
        ph[i] = (px[i] - m) * inv;
        py[i] = g * ph[i] + bta;
      }
    }
  }

  const bool train = mode == BnMode::kTrain;
  return make_node(
      std::move(y), {x, gamma, beta},
      [c, n, plane, reduce, train, xh = std::move(xhat), inv = std::move(inv_std_t),
       channel_ptr](Node& nd) {
        for (int ch = 0; ch < c; ++ch) {
          const double g = nd.parents[1]->value[ch];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int b = 0; b < n; ++b) {
            const double* pdy = channel_ptr(nd.grad, b, ch);
            const double* ph = channel_ptr(xh, b, ch);
            for (int64_t i = 0; i < plane; ++i) {
              sum_dy += pdy[i];
              sum_dy_xhat += pdy[i] * ph[i];
            }
          }
          if (nd.parents[1]->requires_grad) nd.parents[1]->ensure_grad()[ch] += sum_dy_xhat;
          if (nd.parents[2]->requires_grad) nd.parents[2]->ensure_grad()[ch] += sum_dy;
          if (!nd.parents[0]->requires_grad) continue;
          const double k = g * inv[ch];
          const double mean_dy = sum_dy / static_cast<double>(reduce);
          const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(reduce);
          for (int b = 0; b < n; ++b) {
            const double* pdy = channel_ptr(nd.grad, b, ch);
            const double* ph = channel_ptr(xh, b, ch);
            double* pdx = const_cast<double*>(channel_ptr(nd.parents[0]->ensure_grad(), b, ch));
            if (train) {
              for (int64_t i = 0; i < plane; ++i)
                pdx[i] += k * (pdy[i] - mean_dy - ph[i] * mean_dy_xhat);
            } else {
              for (int64_t i = 0; i < plane; ++i) pdx[i] += k * pdy[i];
            }
          }
        }
      });
}

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
  const auto& s = x->value.shape();
  NCL_CHECK(s.size() == 4, "upsample_bilinear: expects [N,C,H,W]");
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  NCL_CHECK(out_h >= 1 && out_w >= 1, "upsample_bilinear: bad target");

  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  auto make_taps = [](int in, int out) {
    std::vector<Tap> taps(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      if (src < 0.0) src = 0.0;
      if (src > in - 1) src = in - 1;
      const int i0 = static_cast<int>(src);
      const int i1 = i0 + 1 < in ? i0 + 1 : i0;
      const double f = src - i0;
      taps[static_cast<size_t>(o)] = {i0, i1, 1.0 - f, f};
    }
    return taps;
  };
  auto ytaps = make_taps(h, out_h);
  auto xtaps = make_taps(w, out_w);

  Tensor y({n, c, out_h, out_w});
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const double* src = x->value.data() + (static_cast<int64_t>(b) * c + ch) * h * w;
      double* dst = y.data() + (static_cast<int64_t>(b) * c + ch) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const Tap& ty = ytaps[static_cast<size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const Tap& tx = xtaps[static_cast<size_t>(ox)];
          dst[static_cast<int64_t>(oy) * out_w + ox] =
              ty.w0 * (tx.w0 * src[static_cast<int64_t>(ty.i0) * w + tx.i0] +
                       tx.w1 * src[static_cast<int64_t>(ty.i0) * w + tx.i1]) +
              ty.w1 * (tx.w0 * src[static_cast<int64_t>(ty.i1) * w + tx.i0] +
                       tx.w1 * src[static_cast<int64_t>(ty.i1) * w + tx.i1]);
        }
      }
    }
  }
  return make_node(std::move(y), {x},
                   [n, c, h, w, out_h, out_w, ytaps, xtaps](Node& nd) {
                     if (!nd.parents[0]->requires_grad) return;
                     Tensor& gx = nd.parents[0]->ensure_grad();
                     for (int b = 0; b < n; ++b) {
                       for (int ch = 0; ch < c; ++ch) {
                         double* dst = gx.data() + (static_cast<int64_t>(b) * c + ch) * h * w;
                         const double* gsrc =
                             nd.grad.data() + (static_cast<int64_t>(b) * c + ch) * out_h * out_w;
                         for (int oy = 0; oy < out_h; ++oy) {
                           const auto& ty = ytaps[static_cast<size_t>(oy)];
                           for (int ox = 0; ox < out_w; ++ox) {
                             const auto& tx = xtaps[static_cast<size_t>(ox)];
                             const double g = gsrc[static_cast<int64_t>(oy) * out_w + ox];
                             dst[static_cast<int64_t>(ty.i0) * w + tx.i0] += ty.w0 * tx.w0 * g;
                             dst[static_cast<int64_t>(ty.i0) * w + tx.i1] += ty.w0 * tx.w1 * g;
                             dst[static_cast<int64_t>(ty.i1) * w + tx.i0] += ty.w1 * tx.w0 * g;
                             dst[static_cast<int64_t>(ty.i1) * w + tx.i1] += ty.w1 * tx.w1 * g;
                           }
                         }
                       }
                     }
                   });
}

Var gather_cells(const Var& x, int n, const std::vector<std::pair<int, int>>& cells) {
  const auto& s = x->value.shape();
  NCL_CHECK(s.size() == 4, "gather_cells: expects [N,C,H,W]");
  NCL_CHECK(n >= 0 && n < s[0], "gather_cells: sample index out of range");
  const int c = s[1], h = s[2], w = s[3];
  const int k = static_cast<int>(cells.size());
  Tensor y({k, c});
  for (int j = 0; j < k; ++j) {
    const auto [r, cc] = cells[static_cast<size_t>(j)];
    NCL_CHECK(r >= 0 && r < h && cc >= 0 && cc < w, "gather_cells: cell out of range");
    for (int ch = 0; ch < c; ++ch)
      y.at2(j, ch) =
          x->value[((static_cast<int64_t>(n) * c + ch) * h + r) * w + cc];
  }
  return make_node(std::move(y), {x}, [n, c, h, w, cells](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (size_t j = 0; j < cells.size(); ++j) {
      const auto [r, cc] = cells[j];
      for (int ch = 0; ch < c; ++ch)
        g[((static_cast<int64_t>(n) * c + ch) * h + r) * w + cc] +=
            nd.grad[static_cast<int64_t>(j) * c + ch];
    }
  });
}

Var mean_rows(const Var& x) {
  const auto& s = x->value.shape();
  NCL_CHECK(s.size() == 2 && s[0] >= 1, "mean_rows: expects non-empty [k, C]");
  const int k = s[0], c = s[1];
  Tensor y({1, c});
  for (int j = 0; j < k; ++j)
    for (int ch = 0; ch < c; ++ch) y[ch] += x->value.at2(j, ch);
  for (int ch = 0; ch < c; ++ch) y[ch] /= k;
  return make_node(std::move(y), {x}, [k, c](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int j = 0; j < k; ++j)
      for (int ch = 0; ch < c; ++ch) g.at2(j, ch) += nd.grad[ch] / k;
  });
}

Var stack_rows(const std::vector<Var>& rows) {
  NCL_CHECK(!rows.empty(), "stack_rows: empty input");
  const int c = rows[0]->value.dim(1);
  const int b = static_cast<int>(rows.size());
  Tensor y({b, c});
  for (int r = 0; r < b; ++r) {
    NCL_CHECK(rows[static_cast<size_t>(r)]->value.numel() == c, "stack_rows: dim mismatch");
    std::copy_n(rows[static_cast<size_t>(r)]->value.data(), c, y.data() + r * c);
  }
  return make_node(std::move(y), rows, [c](Node& nd) {
    for (size_t r = 0; r < nd.parents.size(); ++r) {
      if (!nd.parents[r]->requires_grad) continue;
      Tensor& g = nd.parents[r]->ensure_grad();
      for (int ch = 0; ch < c; ++ch) g[ch] += nd.grad[static_cast<int64_t>(r) * c + ch];
    }
  });
}

Var take_row(const Var& x, int b) {
  const auto& s = x->value.shape();
  NCL_CHECK(s.size() == 2 && b >= 0 && b < s[0], "take_row: out of range");
  const int c = s[1];
  Tensor y({1, c});
  std::copy_n(x->value.data() + static_cast<int64_t>(b) * c, c, y.data());
  return make_node(std::move(y), {x}, [b, c](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int ch = 0; ch < c; ++ch) g[static_cast<int64_t>(b) * c + ch] += nd.grad[ch];
  });
}

Var dot_const(const Var& x, Tensor w) {
  NCL_CHECK(x->value.numel() == w.numel(), "dot_const: size mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < w.numel(); ++i) s += x->value[i] * w[i];
  return make_node(Tensor::scalar(s), {x}, [w = std::move(w)](Node& nd) {
    if (!nd.parents[0]->requires_grad) return;
    Tensor& g = nd.parents[0]->ensure_grad();
    for (int64_t i = 0; i < w.numel(); ++i) g[i] += nd.grad[0] * w[i];
  });
}

}  // namespace ncl::nn
