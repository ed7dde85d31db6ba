#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "distillkit/common.hpp"
#include "distillkit/gaussian.hpp"
#include "distillkit/tensor.hpp"

namespace dk {

/// Softened probabilities: softmax(logits / T). Rank-1 tensors are one
/// distribution; rank-2 tensors are softened row by row.
template <class S>
Tensor<S> softmax_t(const Tensor<S>& logits, S temperature) {
  if (!(temperature > S(0))) throw NumericError("temperature must be positive");
  require_finite(logits, "softmax logits");
  if (logits.rank() != 1 && logits.rank() != 2)
    throw ShapeError("softmax expects rank 1 or 2, got " + shape_string(logits.shape));

  Tensor<S> out = logits;
  long rows = logits.rank() == 2 ? logits.shape[0] : 1;
  long cols = logits.rank() == 2 ? logits.shape[1] : logits.shape[0];
  for (long r = 0; r < rows; ++r) {
    S* row = out.data.data() + r * cols;
    S mx = row[0];
    for (long c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    S sum = S(0);
    for (long c = 0; c < cols; ++c) {
      row[c] = std::exp((row[c] - mx) / temperature);
      sum += row[c];
    }
    for (long c = 0; c < cols; ++c) row[c] /= sum;
  }
  return out;
}

/// H(pred, target) = -sum target * log(pred), probabilities clamped at 1e-12.
/// Both arguments must be distributions (sum to 1 within 1e-5).
template <class S>
S cross_entropy(const Tensor<S>& pred, const Tensor<S>& target) {
  if (!pred.same_shape(target))
    throw ShapeError("cross entropy shapes differ: " + shape_string(pred.shape) + " vs " +
                     shape_string(target.shape));
  if (pred.rank() != 1) throw ShapeError("cross entropy expects rank-1 distributions");
  require_finite(pred, "cross entropy prediction");
  require_finite(target, "cross entropy target");
  auto check_sum = [](const Tensor<S>& t, const char* name) {
    double sum = 0;
    for (const S& v : t.data) sum += double(v);
    if (std::abs(sum - 1.0) > 1e-5)
      throw NumericError(std::string(name) + " does not sum to 1 (got " + std::to_string(sum) + ")");
  };
  check_sum(pred, "cross entropy prediction");
  check_sum(target, "cross entropy target");

  S loss = S(0);
  for (long i = 0; i < pred.numel(); ++i) {
    S p = std::max(pred[i], S(1e-12));
    loss -= target[i] * std::log(p);
  }
  return loss;
}

template <class S>
struct ScalarLoss {
  S loss = S(0);
  Tensor<S> grad;
};

/// Distillation hyperparameters. `t_squared` rescales the soft term by T^2
/// to keep its gradient magnitude comparable across temperatures; off by
/// default.
struct KdParams {
  double temperature = 2.0;
  double lambda = 0.5;
  bool t_squared = false;
};

/// Combined distillation loss over one sample's logits.
template <class S>
struct KdLoss {
  S total = S(0);
  S soft = S(0);  // already includes the optional T^2 factor
  S hard = S(0);
  Tensor<S> grad;  // d total / d student logits
};

template <class S>
ScalarLoss<S> hard_loss(const Tensor<S>& student_logits, int label) {
  if (student_logits.rank() != 1) throw ShapeError("hard loss expects rank-1 logits");
  if (label < 0 || label >= student_logits.shape[0])
    throw ShapeError("label " + std::to_string(label) + " out of range for " +
                     shape_string(student_logits.shape));
  Tensor<S> p = softmax_t(student_logits, S(1));
  ScalarLoss<S> out;
  out.loss = -std::log(std::max(p[label], S(1e-12)));
  out.grad = p;
  out.grad[label] -= S(1);
  return out;
}

template <class S>
KdLoss<S> kd_loss(const Tensor<S>& student_logits, const Tensor<S>& teacher_logits, int label,
                  const KdParams& params) {
  if (!student_logits.same_shape(teacher_logits))
    throw ShapeError("student and teacher logits differ: " + shape_string(student_logits.shape) +
                     " vs " + shape_string(teacher_logits.shape));
  if (!(params.temperature > 0)) throw NumericError("temperature must be positive");
  if (params.lambda < 0) throw NumericError("hard-loss weight must be non-negative");

  const S T = S(params.temperature);
  Tensor<S> p = softmax_t(student_logits, T);
  Tensor<S> q = softmax_t(teacher_logits, T);
  S soft = cross_entropy(p, q);
  ScalarLoss<S> hard = hard_loss(student_logits, label);

  const S soft_scale = params.t_squared ? T * T : S(1);
  const S lambda = S(params.lambda);
  KdLoss<S> out;
  out.soft = soft_scale * soft;
  out.hard = hard.loss;
  out.total = out.soft + lambda * out.hard;
  out.grad = Tensor<S>(student_logits.shape);
  for (long i = 0; i < out.grad.numel(); ++i)
    out.grad[i] = soft_scale * (p[i] - q[i]) / T + lambda * hard.grad[i];
  return out;
}

/// Mean squared error over guidance activations: (1/d) sum (s - t)^2.
template <class S>
ScalarLoss<S> hint_loss(const Tensor<S>& student_hint, const Tensor<S>& teacher_hint) {
  if (!student_hint.same_shape(teacher_hint))
    throw ShapeError("hint widths differ: " + shape_string(student_hint.shape) + " vs " +
                     shape_string(teacher_hint.shape));
  require_finite(student_hint, "student hint");
  require_finite(teacher_hint, "teacher hint");
  const long d = student_hint.numel();
  ScalarLoss<S> out;
  out.grad = Tensor<S>(student_hint.shape);
  for (long i = 0; i < d; ++i) {
    S r = student_hint[i] - teacher_hint[i];
    out.loss += r * r;
    out.grad[i] = S(2) * r / S(d);
  }
  out.loss /= S(d);
  return out;
}

/// Confidence-weighted distance (y - mean)^T (cov + eps I)^-1 (y - mean),
/// evaluated through the stored Cholesky factor; gradient is 2 (cov+eps I)^-1 r.
template <class S>
ScalarLoss<S> mahalanobis_loss(const Tensor<S>& y, const GaussianTarget<S>& target) {
  if (y.rank() != 1 || y.shape[0] != target.dim())
    throw ShapeError("output " + shape_string(y.shape) + " does not match target dimension " +
                     std::to_string(target.dim()));
  require_finite(y, "confidence loss input");
  if (target.chol.rows() != target.dim() || target.chol.cols() != target.dim())
    throw ShapeError("target factor has wrong extents");
  for (int i = 0; i < target.dim(); ++i)
    if (!(target.chol(i, i) > S(0)) || !std::isfinite(double(target.chol(i, i))))
      throw NumericError("target factor is not positive definite");

  ColVec<S> r = y.vec() - target.mean;
  ColVec<S> w = target.chol.template triangularView<Eigen::Lower>().solve(r);
  ColVec<S> z = target.chol.transpose().template triangularView<Eigen::Upper>().solve(w);
  ScalarLoss<S> out;
  out.loss = w.squaredNorm();
  out.grad = Tensor<S>(y.shape);
  out.grad.vec() = S(2) * z;
  require_finite(out.grad, "confidence loss gradient");
  return out;
}

}  // namespace dk
