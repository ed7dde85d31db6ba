#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "distillkit/common.hpp"
#include "distillkit/data.hpp"
#include "distillkit/losses.hpp"
#include "distillkit/network.hpp"

namespace dk {

/// One scored detection decision: classifier score, ground truth, and the
/// synthetic image the patch came from (the per-image false-positive unit).
struct ScoredSample {
  double score = 0;
  bool positive = false;
  int image_id = 0;
};

struct CurvePoint {
  double threshold = 0;
  double fppi = 0;  // false positives per image
  double miss = 0;  // false negatives / positives
};

/// Miss-rate-versus-FPPI curve swept over every distinct score threshold
/// (predict positive iff score >= threshold). Points are deduplicated to
/// strictly increasing FPPI keeping the lowest miss rate at each value.
inline std::vector<CurvePoint> build_curve(const std::vector<ScoredSample>& samples,
                                           int num_images) {
  if (samples.empty()) throw NumericError("no samples to score");
  if (num_images < 1) throw NumericError("image count must be positive");
  long total_pos = 0;
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw NumericError("non-finite score");
    total_pos += s.positive ? 1 : 0;
  }
  if (total_pos == 0) throw NumericError("curve needs at least one positive sample");

  std::vector<const ScoredSample*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);
  std::sort(order.begin(), order.end(),
            [](const ScoredSample* a, const ScoredSample* b) { return a->score > b->score; });

  std::vector<CurvePoint> curve;
  long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    double threshold = order[i]->score;
    // Consume the whole tie group: thresholds are distinct scores.
    while (i < order.size() && order[i]->score == threshold) {
      if (order[i]->positive)
        ++tp;
      else
        ++fp;
      ++i;
    }
    CurvePoint pt;
    pt.threshold = threshold;
    pt.fppi = double(fp) / double(num_images);
    pt.miss = double(total_pos - tp) / double(total_pos);
    if (!curve.empty() && curve.back().fppi == pt.fppi)
      curve.back() = pt;  // same FPPI, lower threshold: miss can only improve
    else
      curve.push_back(pt);
  }
  return curve;
}

/// Geometric mean of the miss rate read at nine FPPI targets evenly
/// log-spaced over [1e-2, 1]. Targets below the curve's reach count as a
/// miss rate of 1; zero miss rates clamp to 1e-10 unless all nine are zero.
inline double log_average_miss_rate(const std::vector<CurvePoint>& curve) {
  if (curve.empty()) throw NumericError("empty curve");
  double log_sum = 0;
  bool any_nonzero = false;
  for (int k = 0; k < 9; ++k) {
    double target = std::pow(10.0, -2.0 + 2.0 * k / 8.0);
    double miss = 1.0;
    bool reached = false;
    for (const auto& pt : curve) {
      if (pt.fppi <= target) {
        miss = pt.miss;  // curve is sorted by increasing FPPI; keep the last
        reached = true;
      } else {
        break;
      }
    }
    if (!reached) miss = 1.0;
    if (miss > 0) any_nonzero = true;
    log_sum += std::log(std::max(miss, 1e-10));
  }
  if (!any_nonzero) return 0.0;
  return std::exp(log_sum / 9.0);
}

struct EvalResult {
  double accuracy = 0;
  double error_rate = 0;
  double auc = 0;
  double lamr = 0;  // fraction, not percent
  long count = 0;
  std::vector<CurvePoint> curve;
};

/// Detection score for one patch: softmax probability of the positive class.
inline double score_patch(const Network<float>& eval_net, LabeledPatch& patch, InputKind kind) {
  Tensor<float> logits = eval_net.infer(encode_input(patch, kind));
  Tensor<float> probs = softmax_t(logits, 1.0f);
  return double(probs[1]);
}

/// Accuracy, ranking quality and the log-average miss rate over one split.
/// The network is evaluated deterministically (eval mode, dropout off).
inline EvalResult evaluate(const Network<float>& net, Dataset& ds, InputKind kind,
                           int threads = -1) {
  if (ds.patches.empty()) throw Error("evaluation split is empty");
  if (net.output_shape() != std::vector<int>{2})
    throw ShapeError("evaluation expects a two-class output head");

  Network<float> eval_net = net;
  eval_net.set_mode(NetMode::eval);
  eval_net.set_dropout_at_eval(false);

  const int n = int(ds.patches.size());
  std::vector<ScoredSample> scored(static_cast<std::size_t>(n));
  std::vector<char> correct(static_cast<std::size_t>(n));
  parallel_for(
      n,
      [&](int i) {
        LabeledPatch& p = ds.patches[std::size_t(i)];
        Tensor<float> logits = eval_net.infer(encode_input(p, kind));
        Tensor<float> probs = softmax_t(logits, 1.0f);
        int pred = probs[1] > probs[0] ? 1 : 0;
        scored[std::size_t(i)] = {double(probs[1]), p.label == 1, p.image_id};
        correct[std::size_t(i)] = pred == p.label;
      },
      threads);

  long pos = 0, neg = 0, right = 0;
  for (int i = 0; i < n; ++i) {
    right += correct[std::size_t(i)];
    (scored[std::size_t(i)].positive ? pos : neg) += 1;
  }
  if (pos == 0 || neg == 0)
    throw Error("evaluation split needs both classes (got " + std::to_string(pos) +
                " positives, " + std::to_string(neg) + " negatives)");

  EvalResult r;
  r.count = n;
  r.accuracy = double(right) / double(n);
  r.error_rate = 1.0 - r.accuracy;

  // Rank-based AUC with half credit for ties.
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[std::size_t(i)] = i;
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    return scored[std::size_t(a)].score < scored[std::size_t(b)].score;
  });
  double rank_sum_pos = 0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() &&
           scored[std::size_t(idx[j])].score == scored[std::size_t(idx[i])].score)
      ++j;
    double avg_rank = 0.5 * double(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k)
      if (scored[std::size_t(idx[k])].positive) rank_sum_pos += avg_rank;
    i = j;
  }
  r.auc = (rank_sum_pos - double(pos) * (double(pos) + 1) / 2.0) / (double(pos) * double(neg));

  r.curve = build_curve(scored, ds.num_images);
  r.lamr = log_average_miss_rate(r.curve);
  return r;
}

}  // namespace dk
