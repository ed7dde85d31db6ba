#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "distillkit/common.hpp"
#include "distillkit/tensor.hpp"

namespace dk {

/// Gaussian summary of a set of network outputs: sample mean, unbiased
/// covariance and the Cholesky factor of the ridged covariance actually used
/// for scoring. `epsilon` records the ridge that made the factorization work.
template <class S>
struct GaussianTarget {
  ColVec<S> mean;
  SquareMat<S> cov;    // unridged sample covariance
  SquareMat<S> chol;   // lower factor L with L L^T = cov + epsilon I
  S epsilon = S(0);
  int sample_count = 0;

  int dim() const { return static_cast<int>(mean.size()); }
};

/// Ridge start: max(1e-6, 1e-4 * trace/d), escalated x10 on factorization
/// failure, at most three escalations.
template <class S>
S initial_ridge(const SquareMat<S>& sym) {
  double trace = 0;
  for (int i = 0; i < sym.rows(); ++i) trace += double(sym(i, i));
  double eps = 1e-4 * trace / double(sym.rows());
  return S(std::max(1e-6, eps));
}

template <class S>
struct RidgedCholesky {
  SquareMat<S> lower;
  S epsilon;
};

template <class S>
RidgedCholesky<S> regularized_cholesky(const SquareMat<S>& sym) {
  if (sym.rows() != sym.cols()) throw ShapeError("covariance must be square");
  S eps = initial_ridge(sym);
  for (int attempt = 0; attempt < 4; ++attempt) {
    SquareMat<S> m = sym;
    m.diagonal().array() += eps;
    Eigen::LLT<SquareMat<S>> llt(m);
    if (llt.info() == Eigen::Success) {
      SquareMat<S> L = llt.matrixL();
      // LLT can "succeed" with junk on the edge of definiteness; insist on
      // strictly positive pivots before accepting.
      bool ok = true;
      for (int i = 0; i < L.rows(); ++i)
        if (!(L(i, i) > S(0)) || !std::isfinite(double(L(i, i)))) ok = false;
      if (ok) return {std::move(L), eps};
    }
    eps *= S(10);
  }
  throw NumericError("covariance not factorizable after ridge escalation");
}

/// Sample mean and unbiased covariance (double accumulation), then the ridged
/// Cholesky factor. Requires strictly more samples than dimensions.
template <class S>
GaussianTarget<S> estimate_gaussian(const std::vector<ColVec<S>>& samples) {
  if (samples.empty()) throw NumericError("no samples to summarize");
  const int d = static_cast<int>(samples[0].size());
  const int n = static_cast<int>(samples.size());
  if (n <= d)
    throw NumericError("need more samples than dimensions: " + std::to_string(n) +
                       " samples for dimension " + std::to_string(d));
  for (const auto& s : samples) {
    if (static_cast<int>(s.size()) != d) throw ShapeError("sample dimensions differ");
    if (!s.allFinite()) throw NumericError("non-finite sample");
  }

  ColVec<double> mean = ColVec<double>::Zero(d);
  for (const auto& s : samples) mean += s.template cast<double>();
  mean /= double(n);

  SquareMat<double> cov = SquareMat<double>::Zero(d, d);
  for (const auto& s : samples) {
    ColVec<double> r = s.template cast<double>() - mean;
    cov.template selfadjointView<Eigen::Lower>().rankUpdate(r, 1.0);
  }
  cov /= double(n - 1);
  cov.template triangularView<Eigen::StrictlyUpper>() = cov.transpose();

  GaussianTarget<S> t;
  t.mean = mean.template cast<S>();
  t.cov = cov.template cast<S>();
  auto rc = regularized_cholesky(t.cov);
  t.chol = std::move(rc.lower);
  t.epsilon = rc.epsilon;
  t.sample_count = n;
  return t;
}

}  // namespace dk
