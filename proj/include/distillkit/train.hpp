#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "distillkit/config.hpp"
#include "distillkit/confidence.hpp"
#include "distillkit/data.hpp"
#include "distillkit/evaluate.hpp"
#include "distillkit/losses.hpp"
#include "distillkit/network.hpp"
#include "distillkit/optimizer.hpp"

namespace dk {

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double soft_loss = 0;  // guidance term: soft CE, hint MSE or confidence distance
  double hard_loss = 0;
  double total_loss = 0;
  double val_error = 0;
  double val_lamr = 0;

  std::string line() const {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g\t%.8g", epoch, lr, soft_loss,
                  hard_loss, total_loss, val_error, val_lamr);
    return buf;
  }
  static const char* header() {
    return "epoch\tlr\tsoft_loss\thard_loss\ttotal_loss\tval_error\tval_lamr";
  }
};

/// Per-sample loss components, composed exactly as total = soft + lambda * hard
/// in float arithmetic (soft already carries any T^2 factor).
struct SampleLoss {
  float total = 0;
  float soft = 0;
  float hard = 0;
};

struct TrainObserver {
  std::function<void(int epoch, int batch, int slot, const LabeledPatch& sample,
                     const SampleLoss& loss)>
      on_sample;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Network<float> net;  // weights of the best validation-error epoch
  int best_epoch = -1;
  double best_val_error = std::numeric_limits<double>::infinity();
  double best_val_lamr = 1.0;
  std::vector<EpochLog> log;
};

/// Monte-Carlo targets for every training patch and its mirror image, keyed
/// by content hash. The per-patch sampling stream is derived from the hash,
/// so the result is independent of traversal order and thread count.
inline TargetStore build_target_store(const Network<float>& teacher, const Dataset& train_ds,
                                      TapKind tap, int mc_samples, std::uint64_t seed_dropout,
                                      TeacherCache* cache = nullptr, int threads = -1,
                                      bool include_flips = true) {
  Network<float> sampler = teacher;
  sampler.set_mode(NetMode::eval);
  sampler.set_dropout_at_eval(true);

  std::vector<std::pair<Hash128, RgbPatch>> variants;
  std::unordered_set<Hash128, Hash128Hasher> seen;
  for (const auto& p : train_ds.patches) {
    Hash128 key = patch_hash(p.rgb);
    if (seen.insert(key).second) variants.emplace_back(key, p.rgb);
    if (include_flips) {
      RgbPatch mirrored = flip_horizontal(p.rgb);
      Hash128 mkey = patch_hash(mirrored);
      if (seen.insert(mkey).second) variants.emplace_back(mkey, std::move(mirrored));
    }
  }

  std::vector<GaussianTarget<float>> results(variants.size());
  parallel_for(
      int(variants.size()),
      [&](int i) {
        const auto& [key, rgb] = variants[std::size_t(i)];
        Tensor<float> input = encode_rgb_input(rgb);
        Mt64Stream rng(derive_seed(seed_dropout, key.hi, key.lo));
        results[std::size_t(i)] = mc_estimate(sampler, input, mc_samples, tap, rng, cache, &key);
      },
      threads);

  TargetStore store;
  for (std::size_t i = 0; i < variants.size(); ++i)
    store.targets.emplace(variants[i].first, std::move(results[std::size_t(i)]));
  return store;
}

/// Trains the architecture given by `cfg` (the student; callers train a
/// teacher by substituting its stack). The teacher is consulted per sample in
/// kd/hint modes; confidence modes read precomputed targets. Fixed seeds give
/// bitwise-reproducible runs.
inline TrainResult train(const Config& cfg, const Network<float>* teacher, Dataset& train_ds,
                         Dataset& val_ds, const TargetStore* targets = nullptr,
                         TeacherCache* cache = nullptr, const TrainObserver* observer = nullptr) {
  ValidatedConfig v = validate_config(cfg);
  const Mode mode = v.mode;
  const bool needs_teacher = mode == Mode::kd || mode == Mode::hint || mode == Mode::hint_conf;
  const bool needs_targets = mode == Mode::conf || mode == Mode::hint_conf;
  if (needs_teacher && !teacher) throw ConfigError("mode " + cfg.mode + " needs a teacher");
  if (needs_targets && !targets)
    throw ConfigError("mode " + cfg.mode + " needs precomputed confidence targets");
  if (train_ds.patches.empty()) throw Error("training split is empty");

  Network<float> student = Network<float>::make(v.student_arch, v.student_input_shape);
  {
    Mt64Stream init_rng(cfg.seed_init);
    student.init_params(init_rng);
  }

  Network<float> teacher_eval;
  if (teacher) {
    if (teacher->input_shape() != v.teacher_input_shape)
      throw ConfigError("teacher input shape " + shape_string(teacher->input_shape()) +
                        " does not match configuration " + shape_string(v.teacher_input_shape));
    teacher_eval = *teacher;
    teacher_eval.set_mode(NetMode::eval);
    teacher_eval.set_dropout_at_eval(false);
  }
  if (mode == Mode::hint || mode == Mode::hint_conf) student.copy_final_dense(teacher_eval);

  student.set_mode(NetMode::train);
  OptimState<float> opt = OptimState<float>::make(student);
  const KdParams kd_params{cfg.temperature, cfg.lambda, cfg.t_squared_scaling};
  const float lambda = float(cfg.lambda);
  const int student_hint_idx =
      (mode == Mode::hint || mode == Mode::hint_conf) ? hint_dense_index(student.layers()) : -1;
  const bool student_has_dropout = first_dropout_index(student.layers()) >= 0;

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg.lr, cfg.lr_drop_factor, cfg.lr_drop_every, epoch);
    Mt64Stream sampler_rng(derive_seed(cfg.seed_data, 0xBA7C4ull, std::uint64_t(epoch)));
    Mt64Stream flip_rng(derive_seed(cfg.seed_data, 0xF11Bull, std::uint64_t(epoch)));
    BatchSampler sampler(train_ds, cfg.batch_size, v.ratio.pos, v.ratio.neg, sampler_rng);

    double sum_soft = 0, sum_hard = 0, sum_total = 0;
    long samples_seen = 0;
    int batch_idx = 0;
    for (;; ++batch_idx) {
      if (cfg.max_batches_per_epoch > 0 && batch_idx >= cfg.max_batches_per_epoch) break;
      std::vector<int> batch = sampler.next();
      if (batch.empty()) break;

      Gradients<float> grad_sum = student.zero_grads();
      for (std::size_t slot = 0; slot < batch.size(); ++slot) {
        LabeledPatch sample = augment_flip(train_ds.patches[std::size_t(batch[slot])], flip_rng,
                                           cfg.flip_prob);
        Tensor<float> input = encode_input(sample, v.input);

        Mt64Stream sample_rng(derive_seed(cfg.seed_dropout, std::uint64_t(epoch),
                                          std::uint64_t(batch_idx), std::uint64_t(slot)));
        auto fr = student.forward(input, student_has_dropout ? &sample_rng : nullptr);

        Hash128 key{};
        if (mode != Mode::direct) key = patch_hash(sample.rgb);

        SampleLoss sl;
        Tensor<float> out_grad;
        std::vector<GradInjection<float>> injections;
        switch (mode) {
          case Mode::direct: {
            ScalarLoss<float> hard = hard_loss(fr.output, sample.label);
            sl = {hard.loss, 0.0f, hard.loss};
            out_grad = std::move(hard.grad);
            break;
          }
          case Mode::kd: {
            Tensor<float> teacher_input =
                v.input == InputKind::rgb ? input : encode_rgb_input(sample.rgb);
            TeacherSignals sig = teacher_signals(teacher_eval, teacher_input, false, cache, &key);
            KdLoss<float> kdl = kd_loss(fr.output, sig.logits, sample.label, kd_params);
            sl = {kdl.total, kdl.soft, kdl.hard};
            out_grad = std::move(kdl.grad);
            break;
          }
          case Mode::conf: {
            const GaussianTarget<float>* t = targets->find(key);
            if (!t)
              throw Error("no confidence target for patch " + key.hex() +
                          "; regenerate targets (flipped variants included)");
            ScalarLoss<float> m = mahalanobis_loss(fr.output, *t);
            ScalarLoss<float> hard = hard_loss(fr.output, sample.label);
            sl.soft = m.loss;
            sl.hard = hard.loss;
            sl.total = sl.soft + lambda * sl.hard;
            out_grad = std::move(m.grad);
            out_grad.vec() += lambda * hard.grad.vec();
            break;
          }
          case Mode::hint:
          case Mode::hint_conf: {
            const Tensor<float>& student_hint = fr.tape.outputs[std::size_t(student_hint_idx)];
            ScalarLoss<float> guide;
            if (mode == Mode::hint) {
              Tensor<float> teacher_input =
                  v.input == InputKind::rgb ? input : encode_rgb_input(sample.rgb);
              TeacherSignals sig = teacher_signals(teacher_eval, teacher_input, true, cache, &key);
              guide = hint_loss(student_hint, sig.hint);
            } else {
              const GaussianTarget<float>* t = targets->find(key);
              if (!t)
                throw Error("no confidence target for patch " + key.hex() +
                            "; regenerate targets (flipped variants included)");
              guide = mahalanobis_loss(student_hint, *t);
            }
            ScalarLoss<float> hard = hard_loss(fr.output, sample.label);
            sl.soft = guide.loss;
            sl.hard = hard.loss;
            sl.total = sl.soft + lambda * sl.hard;
            out_grad = Tensor<float>(fr.output.shape);
            out_grad.vec() = lambda * hard.grad.vec();
            injections.push_back({student_hint_idx, std::move(guide.grad)});
            break;
          }
        }

        Gradients<float> g = student.backward(fr.tape, out_grad, injections);
        grad_axpy(grad_sum, g, 1.0f);

        sum_soft += sl.soft;
        sum_hard += sl.hard;
        sum_total += sl.total;
        ++samples_seen;
        if (observer && observer->on_sample)
          observer->on_sample(epoch, batch_idx, int(slot), sample, sl);
      }
      grad_scale(grad_sum, 1.0f / float(batch.size()));
      sgd_step(student, opt, grad_sum,
               SgdConfig<float>{float(lr), float(cfg.momentum), float(cfg.weight_decay)});
    }
    if (epoch == 0 && samples_seen == 0)
      throw ConfigError("training split cannot fill a single " + std::to_string(cfg.batch_size) +
                        "-sample batch at ratio " + cfg.pos_ratio);

    EvalResult val = evaluate(student, val_ds, v.input);
    EpochLog el;
    el.epoch = epoch;
    el.lr = lr;
    el.soft_loss = samples_seen ? sum_soft / double(samples_seen) : 0;
    el.hard_loss = samples_seen ? sum_hard / double(samples_seen) : 0;
    el.total_loss = samples_seen ? sum_total / double(samples_seen) : 0;
    el.val_error = val.error_rate;
    el.val_lamr = val.lamr;
    result.log.push_back(el);
    if (observer && observer->on_epoch) observer->on_epoch(el);

    if (val.error_rate < result.best_val_error) {
      result.best_val_error = val.error_rate;
      result.best_val_lamr = val.lamr;
      result.best_epoch = epoch;
      result.net = student;
    }
  }
  result.net.set_mode(NetMode::eval);
  return result;
}

}  // namespace dk
