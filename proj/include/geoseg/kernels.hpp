// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

// glibc's resolver header defines _res as a macro, which collides with Eigen
// parameter names when both end up in one translation unit.
#pragma push_macro("_res")
#undef _res
#include <Eigen/Dense>
#pragma pop_macro("_res")

#include "geoseg/error.hpp"
#include "geoseg/pts.hpp"
#include "geoseg/rng.hpp"

namespace geoseg::kernels {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

inline void require_finite(const Matrix& m, const char* what) {
  require(m.size() > 0, ErrorCode::kInvalidArgument, std::string(what) + ": empty matrix");
  require(m.allFinite(), ErrorCode::kInvalidArgument, std::string(what) + ": non-finite value");
}

inline void require_shape(bool ok, const std::string& what) { require(ok, ErrorCode::kDimensionMismatch, what); }

// Numerically stable softmax over a row.
inline RowVector softmax(const RowVector& z) {
  const double top = z.maxCoeff();
  RowVector e = (z.array() - top).exp().matrix();
  return e / e.sum();
}

// Row-wise softmax of a matrix.
inline Matrix softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) out.row(i) = softmax(z.row(i));
  return out;
}

// Directional derivative of softmax at weights w.
inline RowVector softmax_jvp(const RowVector& w, const RowVector& dz) {
  return (w.array() * (dz.array() - w.dot(dz))).matrix();
}

struct TateParams {
  int k_max = 3;
  Matrix proj_w;     // d x 2k_max
  RowVector proj_b;  // d
  Matrix fusion_w;   // d x 2d, applied to [token | projected coords]
  RowVector fusion_b;
  RowVector q_ref;   // d
  Matrix q_res;      // h x d
  Matrix w_g;        // d x d
  double dropout_rate = 0.1;
  RowVector ln_gamma;
  RowVector ln_beta;
  double ln_eps = 1e-12;

  Eigen::Index dim() const { return q_ref.size(); }

  void validate() const {
    const auto d = dim();
    require(d >= 1 && k_max >= 1, ErrorCode::kInvalidArgument, "TateParams: empty dimensions");
    require(q_res.rows() >= 1, ErrorCode::kInvalidArgument, "TateParams: need at least one reasoning query");
    require_shape(proj_w.rows() == d && proj_w.cols() == 2 * k_max && proj_b.size() == d,
                  "TateParams: projection shape");
    require_shape(fusion_w.rows() == d && fusion_w.cols() == 2 * d && fusion_b.size() == d, "TateParams: fusion shape");
    require_shape(q_res.cols() == d && w_g.rows() == d && w_g.cols() == d, "TateParams: reasoning shape");
    require_shape(ln_gamma.size() == d && ln_beta.size() == d, "TateParams: layernorm shape");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorCode::kInvalidArgument,
            "TateParams: dropout rate must be in [0, 1)");
    for (const Matrix* m : {&proj_w, &fusion_w, &q_res, &w_g})
      require(m->allFinite(), ErrorCode::kInvalidArgument, "TateParams: non-finite weight");
    require(proj_b.allFinite() && fusion_b.allFinite() && q_ref.allFinite() && ln_gamma.allFinite() &&
                ln_beta.allFinite(),
            ErrorCode::kInvalidArgument, "TateParams: non-finite weight");
  }

  // Uniform(-scale, scale) weights, identity layernorm.
  static TateParams random(int d, int k_max, int h, Rng& rng, double scale = 0.5) {
    auto fill = [&](Eigen::Index r, Eigen::Index c) {
      Matrix m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * rng.uniform01() - 1.0);
      return m;
    };
    TateParams p;
    p.k_max = k_max;
    p.proj_w = fill(d, 2 * k_max);
    p.proj_b = fill(1, d);
    p.fusion_w = fill(d, 2 * d);
    p.fusion_b = fill(1, d);
    p.q_ref = fill(1, d);
    p.q_res = fill(h, d);
    p.w_g = fill(d, d);
    p.ln_gamma = RowVector::Ones(d);
    p.ln_beta = RowVector::Zero(d);
    return p;
  }
};

inline RowVector pad_coords(const RowVector& coords, int k_max) {
  require(coords.size() <= 2 * k_max, ErrorCode::kInvalidArgument,
          "tate_interactive: more than 2*k_max coordinates");
  RowVector c = RowVector::Zero(2 * k_max);
  c.head(coords.size()) = coords;
  return c;
}

// Coordinate fusion: each token row concatenated with the projected prompt
// coordinates, then one affine map back to d.
inline Matrix tate_interactive(const Matrix& e, const RowVector& coords, const TateParams& p) {
  require_finite(e, "tate_interactive");
  require(coords.allFinite(), ErrorCode::kInvalidArgument, "tate_interactive: non-finite coordinates");
  const auto d = p.dim();
  require_shape(e.cols() == d, "tate_interactive: embedding width differs from parameter width");
  const RowVector proj = pad_coords(coords, p.k_max) * p.proj_w.transpose() + p.proj_b;
  const auto fw_tok = p.fusion_w.leftCols(d);
  const auto fw_crd = p.fusion_w.rightCols(d);
  const RowVector shared = proj * fw_crd.transpose() + p.fusion_b;
  Matrix out = e * fw_tok.transpose();
  out.rowwise() += shared;
  return out;
}

inline RowVector attention_weights(const Matrix& e, const RowVector& q) {
  require_shape(q.size() == e.cols(), "attention: query width differs from embedding width");
  const double scale = std::sqrt(static_cast<double>(e.cols()));
  return softmax((e * q.transpose()).transpose() / scale);
}

// Single-query attention pooling; 1 x d.
inline Matrix tate_referring(const Matrix& e, const RowVector& q) {
  require_finite(e, "tate_referring");
  require(q.allFinite(), ErrorCode::kInvalidArgument, "tate_referring: non-finite query");
  return attention_weights(e, q) * e;
}

// Entries are 0 or 1/(1 - rate).
inline Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, ErrorCode::kInvalidArgument, "dropout rate must be in [0, 1)");
  Rng rng(seed);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform01() < rate ? 0.0 : 1.0 / (1.0 - rate);
  return m;
}

// Row-wise normalization before the affine step.
inline Matrix layernorm_normalize(const Matrix& x, double eps) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowVector c = x.row(i).array() - x.row(i).mean();
    const double var = c.squaredNorm() / static_cast<double>(x.cols());
    out.row(i) = c / std::sqrt(var + eps);
  }
  return out;
}

inline Matrix layernorm(const Matrix& x, const RowVector& gamma, const RowVector& beta, double eps) {
  Matrix y = layernorm_normalize(x, eps);
  y.array().rowwise() *= gamma.array();
  y.rowwise() += beta;
  return y;
}

// Mean of the per-query attention outputs, broadcast to every row, plus the
// global term E * W_G. Before dropout and layernorm.
inline Matrix reasoning_preactivation(const Matrix& e, const Matrix& q_res, const Matrix& w_g) {
  require(q_res.rows() >= 1, ErrorCode::kInvalidArgument, "tate_reasoning: h must be >= 1");
  require_shape(q_res.cols() == e.cols() && w_g.rows() == e.cols() && w_g.cols() == e.cols(),
                "tate_reasoning: shape mismatch");
  RowVector pooled = RowVector::Zero(e.cols());
  for (Eigen::Index i = 0; i < q_res.rows(); ++i) pooled += attention_weights(e, q_res.row(i)) * e;
  pooled /= static_cast<double>(q_res.rows());
  Matrix out = e * w_g;
  out.rowwise() += pooled;
  return out;
}

inline Matrix tate_reasoning(const Matrix& e, const Matrix& q_res, const Matrix& w_g, const TateParams& p,
                             bool training, std::uint64_t dropout_seed = 0) {
  require_finite(e, "tate_reasoning");
  require(q_res.allFinite() && w_g.allFinite(), ErrorCode::kInvalidArgument, "tate_reasoning: non-finite weight");
  Matrix x = reasoning_preactivation(e, q_res, w_g);
  if (training && p.dropout_rate > 0.0)
    x = x.cwiseProduct(dropout_mask(x.rows(), x.cols(), p.dropout_rate, dropout_seed));
  return layernorm(x, p.ln_gamma, p.ln_beta, p.ln_eps);
}

inline Matrix tate_reasoning(const Matrix& e, const TateParams& p, bool training, std::uint64_t dropout_seed = 0) {
  return tate_reasoning(e, p.q_res, p.w_g, p, training, dropout_seed);
}

struct TaskVariants {
  std::optional<Matrix> interactive;
  std::optional<Matrix> referring;
  std::optional<Matrix> reasoning;
};

inline const Matrix& select_embedding(Task task, const TaskVariants& v) {
  const std::optional<Matrix>* slot = nullptr;
  switch (task) {
    case Task::kInteractive: slot = &v.interactive; break;
    case Task::kReferring: slot = &v.referring; break;
    case Task::kReasoning: slot = &v.reasoning; break;
  }
  require(slot && slot->has_value(), ErrorCode::kInvalidArgument,
          "select_embedding: no variant for task " + std::string(to_string(task)));
  return **slot;
}

struct MemoryBank {
  Matrix slots;  // N x d
  double lambda = 0.2;
  bool scale_by_sqrt_d = false;

  void validate(Eigen::Index d) const {
    require(slots.rows() >= 1, ErrorCode::kInvalidArgument, "MemoryBank: need at least one slot");
    require_shape(slots.cols() == d, "MemoryBank: slot width differs from hidden width");
    require(slots.allFinite(), ErrorCode::kInvalidArgument, "MemoryBank: non-finite slot");
    require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::kInvalidArgument, "MemoryBank: lambda must be in [0, 1]");
  }
};

inline Matrix memory_scores(const Matrix& h, const MemoryBank& bank) {
  Matrix s = h * bank.slots.transpose();
  if (bank.scale_by_sqrt_d) s /= std::sqrt(static_cast<double>(h.cols()));
  return s;
}

// Per row: softmax over the slots, convex combination of slots, blended back
// with weight lambda.
inline Matrix lkm_fuse(const Matrix& h, const MemoryBank& bank) {
  require_finite(h, "lkm_fuse");
  bank.validate(h.cols());
  const Matrix z = softmax_rows(memory_scores(h, bank)) * bank.slots;
  return (1.0 - bank.lambda) * h + bank.lambda * z;
}

// ---------------------------------------------------------------------------
// Differentiable views for gradient checking. Arguments listed in `args` are
// the differentiated inputs; everything else is captured.

using Args = std::vector<Matrix>;

struct DiffOp {
  std::string name;
  std::function<Matrix(const Args&)> f;
  std::function<Matrix(const Args& x, const Args& v)> jvp;
};

// args: {E (L x d), coords (1 x n)}
inline DiffOp interactive_op(const TateParams& p) {
  DiffOp op;
  op.name = "tate_interactive";
  op.f = [p](const Args& a) { return tate_interactive(a[0], a[1], p); };
  op.jvp = [p](const Args& a, const Args& v) {
    const auto d = p.dim();
    const RowVector dproj = pad_coords(v[1], p.k_max) * p.proj_w.transpose();
    Matrix out = v[0] * p.fusion_w.leftCols(d).transpose();
    out.rowwise() += dproj * p.fusion_w.rightCols(d).transpose();
    (void)a;
    return out;
  };
  return op;
}

namespace detail {

// d(softmax(E q / s) E) for tangents dE, dq.
inline RowVector attention_pool_jvp(const Matrix& e, const RowVector& q, const Matrix& de, const RowVector& dq) {
  const double s = std::sqrt(static_cast<double>(e.cols()));
  const RowVector w = attention_weights(e, q);
  const RowVector dz = ((de * q.transpose()) + (e * dq.transpose())).transpose() / s;
  return softmax_jvp(w, dz) * e + w * de;
}

inline Matrix layernorm_jvp(const Matrix& x, const Matrix& dx, const RowVector& gamma, double eps) {
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const RowVector c = x.row(i).array() - x.row(i).mean();
    const double r = 1.0 / std::sqrt(c.squaredNorm() / n + eps);
    const RowVector y = c * r;
    const RowVector dc = dx.row(i).array() - dx.row(i).mean();
    const RowVector dy = r * (dc - y * (y.dot(dc) / n));
    out.row(i) = dy.cwiseProduct(gamma);
  }
  return out;
}

}  // namespace detail

// args: {E (L x d), q (1 x d)}
inline DiffOp referring_op() {
  DiffOp op;
  op.name = "tate_referring";
  op.f = [](const Args& a) { return tate_referring(a[0], a[1]); };
  op.jvp = [](const Args& a, const Args& v) -> Matrix {
    return detail::attention_pool_jvp(a[0], a[1], v[0], v[1]);
  };
  return op;
}

// args: {E (L x d), q_res (h x d), W_G (d x d)}; dropout off.
inline DiffOp reasoning_op(const TateParams& p) {
  DiffOp op;
  op.name = "tate_reasoning";
  op.f = [p](const Args& a) { return tate_reasoning(a[0], a[1], a[2], p, false); };
  op.jvp = [p](const Args& a, const Args& v) {
    const Matrix& e = a[0];
    RowVector dpooled = RowVector::Zero(e.cols());
    for (Eigen::Index i = 0; i < a[1].rows(); ++i)
      dpooled += detail::attention_pool_jvp(e, a[1].row(i), v[0], v[1].row(i));
    dpooled /= static_cast<double>(a[1].rows());
    Matrix dx = v[0] * a[2] + e * v[2];
    dx.rowwise() += dpooled;
    return detail::layernorm_jvp(reasoning_preactivation(e, a[1], a[2]), dx, p.ln_gamma, p.ln_eps);
  };
  return op;
}

// args: {H (L x d), slots (N x d)}
inline DiffOp lkm_op(double lambda, bool scale_by_sqrt_d = false) {
  DiffOp op;
  op.name = "lkm_fuse";
  op.f = [=](const Args& a) { return lkm_fuse(a[0], MemoryBank{a[1], lambda, scale_by_sqrt_d}); };
  op.jvp = [=](const Args& a, const Args& v) {
    const Matrix& h = a[0];
    const Matrix& m = a[1];
    const MemoryBank bank{m, lambda, scale_by_sqrt_d};
    const Matrix w = softmax_rows(memory_scores(h, bank));
    Matrix ds = v[0] * m.transpose() + h * v[1].transpose();
    if (scale_by_sqrt_d) ds /= std::sqrt(static_cast<double>(h.cols()));
    Matrix dw(w.rows(), w.cols());
    for (Eigen::Index i = 0; i < w.rows(); ++i) dw.row(i) = softmax_jvp(w.row(i), ds.row(i));
    const Matrix dz = dw * m + w * v[1];
    return Matrix((1.0 - lambda) * v[0] + lambda * dz);
  };
  return op;
}

struct GradCheck {
  double max_abs_deviation = 0.0;
  double max_rel_deviation = 0.0;  // deviation / max(|analytic|_inf, |numeric|_inf)
};

// Central differences along random unit directions versus the analytic JVP.
inline GradCheck finite_diff_check(const DiffOp& op, const Args& x, double epsilon, int samples, Rng& rng) {
  require(epsilon > 0.0 && samples >= 1, ErrorCode::kInvalidArgument, "finite_diff_check: bad settings");
  GradCheck out;
  for (int s = 0; s < samples; ++s) {
    Args v;
    double norm2 = 0.0;
    for (const auto& m : x) {
      Matrix r(m.rows(), m.cols());
      for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = 2.0 * rng.uniform01() - 1.0;
      norm2 += r.squaredNorm();
      v.push_back(std::move(r));
    }
    const double inv = 1.0 / std::sqrt(norm2);
    Args plus = x, minus = x;
    for (std::size_t k = 0; k < x.size(); ++k) {
      v[k] *= inv;
      plus[k] += epsilon * v[k];
      minus[k] -= epsilon * v[k];
    }
    const Matrix numeric = (op.f(plus) - op.f(minus)) / (2.0 * epsilon);
    const Matrix analytic = op.jvp(x, v);
    require_shape(numeric.rows() == analytic.rows() && numeric.cols() == analytic.cols(),
                  op.name + ": JVP shape differs from output shape");
    const double dev = (numeric - analytic).cwiseAbs().maxCoeff();
    const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-300});
    out.max_abs_deviation = std::max(out.max_abs_deviation, dev);
    out.max_rel_deviation = std::max(out.max_rel_deviation, dev / scale);
  }
  return out;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * (2.0 * rng.uniform01() - 1.0);
  return m;
}

// ---------------------------------------------------------------------------
// Invariant and gradient suite shared by the CLI and the tests.

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::vector<CheckResult> run_kernel_checks(std::uint64_t seed = 7, double tolerance = 1e-4,
                                                  double epsilon = 1e-5, int samples = 8) {
  std::vector<CheckResult> results;
  auto record = [&](std::string name, bool ok, std::string detail) {
    results.push_back({std::move(name), ok, std::move(detail)});
  };
  Rng rng(seed);
  const int L = 5, d = 6, h = 4, k_max = 3, n_slots = 4;
  TateParams p = TateParams::random(d, k_max, h, rng);
  p.ln_gamma = random_matrix(1, d, rng).array() + 1.5;
  p.ln_beta = random_matrix(1, d, rng);
  p.validate();
  const Matrix e = random_matrix(L, d, rng);
  const Matrix slots = random_matrix(n_slots, d, rng);

  {
    const Matrix out = lkm_fuse(e, MemoryBank{slots, 0.0});
    const double diff = (out - e).cwiseAbs().maxCoeff();
    record("lkm_lambda0_identity", diff < 1e-12, "max abs diff " + fmt_g(diff));
  }
  {
    double worst = 0.0;
    bool nonneg = true;
    auto check = [&](const RowVector& w) {
      worst = std::max(worst, std::abs(w.sum() - 1.0));
      nonneg = nonneg && (w.array() >= 0.0).all();
    };
    check(attention_weights(e, p.q_ref));
    for (Eigen::Index i = 0; i < p.q_res.rows(); ++i) check(attention_weights(e, p.q_res.row(i)));
    const Matrix w = softmax_rows(memory_scores(e, MemoryBank{slots, 0.2}));
    for (Eigen::Index i = 0; i < w.rows(); ++i) check(w.row(i));
    record("softmax_sums_to_one", nonneg && worst <= 1e-9, "max |sum-1| " + fmt_g(worst));
  }
  {
    const Matrix x = reasoning_preactivation(e, p.q_res, p.w_g);
    const Matrix y = layernorm_normalize(x, p.ln_eps);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      worst = std::max(worst, std::abs(y.row(i).mean()));
      worst = std::max(worst, std::abs(y.row(i).squaredNorm() / d - 1.0));
    }
    record("layernorm_mean0_var1", worst <= 1e-9, "max deviation " + fmt_g(worst));
  }
  {
    TaskVariants v{tate_interactive(e, RowVector::Constant(4, 0.25), p), tate_referring(e, p.q_ref),
                   tate_reasoning(e, p, false)};
    const bool ok = select_embedding(Task::kInteractive, v) == *v.interactive &&
                    select_embedding(Task::kReferring, v) == *v.referring &&
                    select_embedding(Task::kReasoning, v) == *v.reasoning &&
                    &select_embedding(Task::kReasoning, v) == &*v.reasoning;
    record("select_embedding_dispatch", ok, ok ? "exact variant per task" : "wrong variant");
  }
  auto grad = [&](const DiffOp& op, const Args& x) {
    const GradCheck g = finite_diff_check(op, x, epsilon, samples, rng);
    record("gradcheck_" + op.name, g.max_rel_deviation <= tolerance,
           "rel " + fmt_g(g.max_rel_deviation) + ", abs " + fmt_g(g.max_abs_deviation));
  };
  grad(interactive_op(p), {e, random_matrix(1, 2 * k_max, rng)});
  grad(referring_op(), {e, p.q_ref});
  grad(reasoning_op(p), {e, p.q_res, p.w_g});
  grad(lkm_op(0.2), {e, slots});
  return results;
}

}  // namespace geoseg::kernels
