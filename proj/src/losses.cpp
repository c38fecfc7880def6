#include "ncl/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ncl::losses {

namespace {

constexpr double kNormEps = 1e-12;

double stable_norm(const double* v, int c) {
  double dot = 0.0;
  for (int i = 0; i < c; ++i) dot += v[i] * v[i];
  return std::sqrt(dot + kNormEps * kNormEps);
}

double cosine(const double* a, const double* b, int c, double na, double nb) {
  double dot = 0.0;
  for (int i = 0; i < c; ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

// d cos(x, y) / dx = y/(|x||y|) - cos * x/|x|^2, accumulated with weight w.
void add_cosine_grad_x(double* gx, const double* x, const double* y, int c, double s,
                       double nx, double ny, double w) {
  const double inv_xy = 1.0 / (nx * ny);
  const double inv_xx = 1.0 / (nx * nx);
  for (int i = 0; i < c; ++i) gx[i] += w * (y[i] * inv_xy - s * x[i] * inv_xx);
}

struct SimTables {
  int m = 0, n = 0, c = 0;
  std::vector<double> s_pp;       // m x m
  std::vector<double> s_pn;       // m x n
  std::vector<double> s_plus_p;   // m
  std::vector<double> s_plus_n;   // n
  std::vector<double> s_minus_p;  // m
  std::vector<double> s_minus_n;  // n
  std::vector<double> npos, nneg;
  double n_plus = 0.0, n_minus = 0.0;
  bool pivot = false;
};

SimTables build_sims(const ContrastBatch& b) {
  SimTables t;
  t.m = b.pos.empty() ? 0 : b.pos.dim(0);
  t.n = b.neg.empty() ? 0 : b.neg.dim(0);
  t.c = t.m > 0 ? b.pos.dim(1) : (t.n > 0 ? b.neg.dim(1) : 0);
  t.pivot = b.pivot.has_value();
  if (t.m > 0 && t.n > 0)
    NCL_CHECK(b.pos.dim(1) == b.neg.dim(1), "pos/neg feature dims differ");
  if (t.pivot && t.c > 0)
    NCL_CHECK(b.pivot->se_plus.numel() == t.c && b.pivot->se_minus.numel() == t.c,
              "pivot embedding dim differs from cell features");

  const double* pos = b.pos.data();
  const double* neg = b.neg.data();
  t.npos.resize(static_cast<size_t>(t.m));
  t.nneg.resize(static_cast<size_t>(t.n));
  for (int a = 0; a < t.m; ++a) t.npos[a] = stable_norm(pos + a * t.c, t.c);
  for (int i = 0; i < t.n; ++i) t.nneg[i] = stable_norm(neg + i * t.c, t.c);

  t.s_pp.assign(static_cast<size_t>(t.m) * t.m, 0.0);
  t.s_pn.assign(static_cast<size_t>(t.m) * t.n, 0.0);
  for (int a = 0; a < t.m; ++a) {
    for (int j = 0; j < t.m; ++j)
      t.s_pp[a * t.m + j] = cosine(pos + a * t.c, pos + j * t.c, t.c, t.npos[a], t.npos[j]);
    for (int i = 0; i < t.n; ++i)
      t.s_pn[a * t.n + i] = cosine(pos + a * t.c, neg + i * t.c, t.c, t.npos[a], t.nneg[i]);
  }
  if (t.pivot) {
    const double* sp = b.pivot->se_plus.data();
    const double* sm = b.pivot->se_minus.data();
    t.n_plus = stable_norm(sp, t.c);
    t.n_minus = stable_norm(sm, t.c);
    t.s_plus_p.resize(static_cast<size_t>(t.m));
    t.s_minus_p.resize(static_cast<size_t>(t.m));
    t.s_plus_n.resize(static_cast<size_t>(t.n));
    t.s_minus_n.resize(static_cast<size_t>(t.n));
    for (int j = 0; j < t.m; ++j) {
      t.s_plus_p[j] = cosine(sp, b.pos.data() + j * t.c, t.c, t.n_plus, t.npos[j]);
      t.s_minus_p[j] = cosine(sm, b.pos.data() + j * t.c, t.c, t.n_minus, t.npos[j]);
    }
    for (int i = 0; i < t.n; ++i) {
      t.s_plus_n[i] = cosine(sp, b.neg.data() + i * t.c, t.c, t.n_plus, t.nneg[i]);
      t.s_minus_n[i] = cosine(sm, b.neg.data() + i * t.c, t.c, t.n_minus, t.nneg[i]);
    }
  }
  return t;
}

// Value plus d(loss)/d(similarity) tables. Softmax groups are shift-
// stabilized; the shift cancels in every ratio.
struct SimGradTables {
  double value = 0.0;
  std::vector<double> d_pp, d_pn, d_plus_p, d_plus_n, d_minus_p, d_minus_n;
};

SimGradTables ncl_on_sims(const SimTables& t, double tau, bool want_grad) {
  SimGradTables g;
  const int m = t.m, n = t.n;
  const double inv_tau = 1.0 / tau;
  if (want_grad) {
    g.d_pp.assign(t.s_pp.size(), 0.0);
    g.d_pn.assign(t.s_pn.size(), 0.0);
    g.d_plus_p.assign(t.s_plus_p.size(), 0.0);
    g.d_plus_n.assign(t.s_plus_n.size(), 0.0);
    g.d_minus_p.assign(t.s_minus_p.size(), 0.0);
    g.d_minus_n.assign(t.s_minus_n.size(), 0.0);
  }

  // Term 1: anchors over positives, ordered pairs a != j, negatives in the
  // denominator.
  if (m >= 2) {
    const double w = 1.0 / (static_cast<double>(m) * (m - 1));
    for (int a = 0; a < m; ++a) {
      double shift = -1.0;
      for (int j = 0; j < m; ++j)
        if (j != a) shift = std::max(shift, t.s_pp[a * m + j]);
      for (int i = 0; i < n; ++i) shift = std::max(shift, t.s_pn[a * n + i]);
      shift *= inv_tau;

      double neg_sum = 0.0;
      for (int i = 0; i < n; ++i) neg_sum += std::exp(t.s_pn[a * n + i] * inv_tau - shift);

      double inv_denom_sum = 0.0;
      for (int j = 0; j < m; ++j) {
        if (j == a) continue;
        const double e = std::exp(t.s_pp[a * m + j] * inv_tau - shift);
        const double denom = e + neg_sum;
        g.value += -w * std::log(e / denom);
        if (want_grad) {
          g.d_pp[a * m + j] += w * (e / denom - 1.0) * inv_tau;
          inv_denom_sum += 1.0 / denom;
        }
      }
      if (want_grad) {
        for (int i = 0; i < n; ++i)
          g.d_pn[a * n + i] +=
              w * std::exp(t.s_pn[a * n + i] * inv_tau - shift) * inv_denom_sum * inv_tau;
      }
    }
  }

  if (!t.pivot) return g;

  // Term 2: hard positive se+ against every positive, negatives in the
  // denominator.
  if (m >= 1) {
    const double w = 1.0 / m;
    double shift = -1.0;
    for (int j = 0; j < m; ++j) shift = std::max(shift, t.s_plus_p[j]);
    for (int i = 0; i < n; ++i) shift = std::max(shift, t.s_plus_n[i]);
    shift *= inv_tau;

    double neg_sum = 0.0;
    for (int i = 0; i < n; ++i) neg_sum += std::exp(t.s_plus_n[i] * inv_tau - shift);
    double inv_denom_sum = 0.0;
    for (int j = 0; j < m; ++j) {
      const double e = std::exp(t.s_plus_p[j] * inv_tau - shift);
      const double denom = e + neg_sum;
      g.value += -w * std::log(e / denom);
      if (want_grad) {
        g.d_plus_p[j] += w * (e / denom - 1.0) * inv_tau;
        inv_denom_sum += 1.0 / denom;
      }
    }
    if (want_grad) {
      for (int i = 0; i < n; ++i)
        g.d_plus_n[i] +=
            w * std::exp(t.s_plus_n[i] * inv_tau - shift) * inv_denom_sum * inv_tau;
    }
  }

  // Term 3: hard negative se- against every negative; the denominator's
  // positive set excludes the designated anchor positive, averaged over all
  // anchor choices (keeps the term permutation invariant).
  if (m >= 1 && n >= 1) {
    const double w = 1.0 / (static_cast<double>(m) * n);
    double shift = -1.0;
    for (int j = 0; j < m; ++j) shift = std::max(shift, t.s_minus_p[j]);
    for (int i = 0; i < n; ++i) shift = std::max(shift, t.s_minus_n[i]);
    shift *= inv_tau;

    std::vector<double> ep(static_cast<size_t>(m));
    double ep_total = 0.0;
    for (int j = 0; j < m; ++j) {
      ep[j] = std::exp(t.s_minus_p[j] * inv_tau - shift);
      ep_total += ep[j];
    }
    std::vector<double> en(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) en[i] = std::exp(t.s_minus_n[i] * inv_tau - shift);

    for (int a = 0; a < m; ++a) {
      const double pos_sum = ep_total - ep[a];
      double inv_denom_sum = 0.0;
      for (int i = 0; i < n; ++i) {
        const double denom = en[i] + pos_sum;
        g.value += -w * std::log(en[i] / denom);
        if (want_grad) {
          g.d_minus_n[i] += w * (en[i] / denom - 1.0) * inv_tau;
          inv_denom_sum += 1.0 / denom;
        }
      }
      if (want_grad) {
        for (int j = 0; j < m; ++j)
          if (j != a) g.d_minus_p[j] += w * ep[j] * inv_denom_sum * inv_tau;
      }
    }
  }
  return g;
}

NclGrads ncl_impl(const ContrastBatch& batch, bool want_grad) {
  NCL_CHECK(batch.tau > 0.0, "temperature must be positive");
  if (!batch.pos.empty()) NCL_CHECK(batch.pos.ndim() == 2, "pos must be m x C");
  if (!batch.neg.empty()) NCL_CHECK(batch.neg.ndim() == 2, "neg must be n x C");

  const SimTables t = build_sims(batch);
  const SimGradTables g = ncl_on_sims(t, batch.tau, want_grad);

  NclGrads out;
  out.value = g.value;
  if (!want_grad) return out;

  const int m = t.m, n = t.n, c = t.c;
  out.d_pos = Tensor({m, c});
  out.d_neg = Tensor({n, c});
  const double* pos = batch.pos.data();
  const double* neg = batch.neg.data();

  for (int a = 0; a < m; ++a) {
    for (int j = 0; j < m; ++j) {
      if (a == j) continue;
      const double wg = g.d_pp[a * m + j];
      if (wg == 0.0) continue;
      const double s = t.s_pp[a * m + j];
      add_cosine_grad_x(out.d_pos.data() + a * c, pos + a * c, pos + j * c, c, s, t.npos[a],
                        t.npos[j], wg);
      add_cosine_grad_x(out.d_pos.data() + j * c, pos + j * c, pos + a * c, c, s, t.npos[j],
                        t.npos[a], wg);
    }
    for (int i = 0; i < n; ++i) {
      const double wg = g.d_pn[a * n + i];
      if (wg == 0.0) continue;
      const double s = t.s_pn[a * n + i];
      add_cosine_grad_x(out.d_pos.data() + a * c, pos + a * c, neg + i * c, c, s, t.npos[a],
                        t.nneg[i], wg);
      add_cosine_grad_x(out.d_neg.data() + i * c, neg + i * c, pos + a * c, c, s, t.nneg[i],
                        t.npos[a], wg);
    }
  }

  if (t.pivot) {
    out.d_se_plus = Tensor({c});
    out.d_se_minus = Tensor({c});
    const double* sp = batch.pivot->se_plus.data();
    const double* sm = batch.pivot->se_minus.data();
    for (int j = 0; j < m; ++j) {
      if (double wg = g.d_plus_p[j]; wg != 0.0) {
        add_cosine_grad_x(out.d_se_plus.data(), sp, pos + j * c, c, t.s_plus_p[j], t.n_plus,
                          t.npos[j], wg);
        add_cosine_grad_x(out.d_pos.data() + j * c, pos + j * c, sp, c, t.s_plus_p[j],
                          t.npos[j], t.n_plus, wg);
      }
      if (double wg = g.d_minus_p[j]; wg != 0.0) {
        add_cosine_grad_x(out.d_se_minus.data(), sm, pos + j * c, c, t.s_minus_p[j], t.n_minus,
                          t.npos[j], wg);
        add_cosine_grad_x(out.d_pos.data() + j * c, pos + j * c, sm, c, t.s_minus_p[j],
                          t.npos[j], t.n_minus, wg);
      }
    }
    for (int i = 0; i < n; ++i) {
      if (double wg = g.d_plus_n[i]; wg != 0.0) {
        add_cosine_grad_x(out.d_se_plus.data(), sp, neg + i * c, c, t.s_plus_n[i], t.n_plus,
                          t.nneg[i], wg);
        add_cosine_grad_x(out.d_neg.data() + i * c, neg + i * c, sp, c, t.s_plus_n[i],
                          t.nneg[i], t.n_plus, wg);
      }
      if (double wg = g.d_minus_n[i]; wg != 0.0) {
        add_cosine_grad_x(out.d_se_minus.data(), sm, neg + i * c, c, t.s_minus_n[i], t.n_minus,
                          t.nneg[i], wg);
        add_cosine_grad_x(out.d_neg.data() + i * c, neg + i * c, sm, c, t.s_minus_n[i],
                          t.nneg[i], t.n_minus, wg);
      }
    }
  }
  return out;
}

}  // namespace

double similarity(std::span<const double> a, std::span<const double> b) {
  NCL_CHECK(a.size() == b.size() && !a.empty(), "similarity: dim mismatch");
  const int c = static_cast<int>(a.size());
  return cosine(a.data(), b.data(), c, stable_norm(a.data(), c), stable_norm(b.data(), c));
}

double ncl_loss(const ContrastBatch& batch) { return ncl_impl(batch, false).value; }

NclGrads ncl_loss_grad(const ContrastBatch& batch) { return ncl_impl(batch, true); }

namespace {

PcGrads pc_impl(std::span<const PCStage> stages, double mu, bool want_grad) {
  NCL_CHECK(mu >= 0.0 && mu <= 1.0, "mu must lie in [0, 1]");
  NCL_CHECK(!stages.empty(), "pc_loss needs at least one stage");

  PcGrads out;
  for (const PCStage& st : stages) {
    NCL_CHECK(st.probs.ndim() == 2, "stage probs must be h x w");
    const int h = st.probs.dim(0), w = st.probs.dim(1);
    NCL_CHECK(st.gt.height == h && st.gt.width == w, "stage gt dims mismatch");
    NCL_CHECK(st.contour.height == h && st.contour.width == w, "stage contour dims mismatch");

    const int64_t all_count = static_cast<int64_t>(h) * w;
    const int64_t contour_count = st.contour.count_ones();

    double all_sum = 0.0, contour_sum = 0.0;
    Tensor d({h, w});
    const double w_all = (1.0 - mu) / static_cast<double>(all_count);
    const double w_contour =
        contour_count > 0 ? mu / static_cast<double>(contour_count) : 0.0;
    for (int64_t i = 0; i < all_count; ++i) {
      const double gamma = st.gt.data[static_cast<size_t>(i)];
      const double theta = std::clamp(st.probs[i], kProbEps, 1.0 - kProbEps);
      const double bce = -(gamma * std::log(theta) + (1.0 - gamma) * std::log(1.0 - theta));
      all_sum += bce;
      const bool is_contour = st.contour.data[static_cast<size_t>(i)] != 0;
      if (is_contour) contour_sum += bce;
      if (want_grad) {
        const double wp = w_all + (is_contour ? w_contour : 0.0);
        d[i] = wp * (-gamma / theta + (1.0 - gamma) / (1.0 - theta));
      }
    }
    const double stage = w_contour * contour_sum + w_all * all_sum;
    out.result.per_stage.push_back(stage);
    out.result.total += stage;
    if (want_grad) out.d_probs.push_back(std::move(d));
  }
  return out;
}

}  // namespace

PcResult pc_loss(std::span<const PCStage> stages, double mu) {
  return pc_impl(stages, mu, false).result;
}

PcGrads pc_loss_grad(std::span<const PCStage> stages, double mu) {
  return pc_impl(stages, mu, true);
}

double total_loss(double ncl, double pc, double omega) {
  NCL_CHECK(std::isfinite(ncl) && std::isfinite(pc), "loss terms must be finite");
  NCL_CHECK(omega >= 0.0, "omega must be non-negative");
  return omega * ncl + pc;
}

}  // namespace ncl::losses
