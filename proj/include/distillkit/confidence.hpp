#pragma once

#include <atomic>
#include <algorithm>
#include <fstream>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "distillkit/binio.hpp"
#include "distillkit/gaussian.hpp"
#include "distillkit/hash.hpp"
#include "distillkit/network.hpp"

namespace dk {

/// Memoizes the deterministic part of teacher forwards (everything below the
/// first dropout layer), keyed by the input patch's content hash. Thread-safe;
/// a resident key is computed at most once.
class TeacherCache {
 public:
  explicit TeacherCache(std::size_t capacity = 1 << 20) : capacity_(std::max<std::size_t>(1, capacity)) {}

  Tensor<float> get_or_compute(const Hash128& key,
                               const std::function<Tensor<float>()>& compute) {
    std::shared_ptr<Entry> entry;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = map_.find(key);
      if (it == map_.end()) {
        entry = std::make_shared<Entry>();
        lru_.push_front(key);
        entry->lru_pos = lru_.begin();
        map_.emplace(key, entry);
        while (map_.size() > capacity_) {
          auto victim = map_.find(lru_.back());
          lru_.pop_back();
          if (victim != map_.end()) map_.erase(victim);
        }
      } else {
        entry = it->second;
        lru_.splice(lru_.begin(), lru_, entry->lru_pos);
        entry->lru_pos = lru_.begin();
        ++hits_;
      }
    }
    std::lock_guard<std::mutex> lock(entry->m);
    if (!entry->ready) {
      entry->value = compute();
      entry->ready = true;
      ++computed_;
    }
    return entry->value;
  }

  std::size_t computed() const { return computed_.load(); }
  std::size_t hits() const { return hits_.load(); }
  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return map_.size();
  }

  void clear() {
    std::lock_guard<std::mutex> lock(mu_);
    map_.clear();
    lru_.clear();
  }

 private:
  struct Entry {
    std::mutex m;
    bool ready = false;
    Tensor<float> value;
    std::list<Hash128>::iterator lru_pos;
  };

  mutable std::mutex mu_;
  std::unordered_map<Hash128, std::shared_ptr<Entry>, Hash128Hasher> map_;
  std::list<Hash128> lru_;
  std::size_t capacity_;
  std::atomic<std::size_t> computed_{0};
  std::atomic<std::size_t> hits_{0};
};

/// Which activation the sampler observes.
enum class TapKind { logits, hint };

inline int tap_layer_index(const std::vector<LayerSpec>& specs, TapKind tap) {
  if (tap == TapKind::logits) return static_cast<int>(specs.size()) - 1;
  int idx = hint_dense_index(specs);
  if (idx < 0) throw ConfigError("network has no guidance layer (needs two dense layers)");
  return idx;
}

/// Runs `n` stochastic forward passes with dropout firing at inference and
/// collects the tapped activation of each pass. The sub-network below the
/// first dropout layer is deterministic, computed once, and optionally cached
/// under the patch's content hash.
inline std::vector<ColVec<float>> mc_sample(const Network<float>& net, const Tensor<float>& input,
                                            int n, TapKind tap, RandomStream& rng,
                                            TeacherCache* cache = nullptr,
                                            const Hash128* key = nullptr) {
  if (n < 2) throw NumericError("sampling needs at least two passes, got " + std::to_string(n));
  if (net.mode() != NetMode::eval || !net.dropout_at_eval())
    throw Error("sampling network must be in eval mode with dropout-at-eval enabled");
  int split = first_dropout_index(net.layers());
  if (split < 0) throw ConfigError("sampling network has no dropout layer");
  int tap_idx = tap_layer_index(net.layers(), tap);

  Tensor<float> prefix;
  if (cache && key)
    prefix = cache->get_or_compute(*key, [&] { return net.forward_range(input, 0, split); });
  else
    prefix = net.forward_range(input, 0, split);

  std::vector<ColVec<float>> samples;
  samples.reserve(static_cast<std::size_t>(n));
  if (tap_idx < split) {
    // Tap sits in the deterministic region: every pass observes the same value.
    Tensor<float> tapped;
    net.forward_range(input, 0, split, nullptr, tap_idx, &tapped);
    for (int k = 0; k < n; ++k) samples.push_back(tapped.vec());
    return samples;
  }
  for (int k = 0; k < n; ++k) {
    Tensor<float> tapped;
    Tensor<float> out = net.forward_range(prefix, split, net.layer_count(), &rng, tap_idx, &tapped);
    const Tensor<float>& observed = tap == TapKind::logits ? out : tapped;
    if (observed.rank() != 1) throw ShapeError("tapped activation must be rank 1");
    samples.push_back(observed.vec());
  }
  return samples;
}

inline GaussianTarget<float> mc_estimate(const Network<float>& net, const Tensor<float>& input,
                                         int n, TapKind tap, RandomStream& rng,
                                         TeacherCache* cache = nullptr,
                                         const Hash128* key = nullptr) {
  return estimate_gaussian(mc_sample(net, input, n, tap, rng, cache, key));
}

/// Deterministic teacher outputs for one patch: final logits plus the
/// guidance activation. Uses the prefix cache when provided.
struct TeacherSignals {
  Tensor<float> logits;
  Tensor<float> hint;
};

inline TeacherSignals teacher_signals(const Network<float>& teacher, const Tensor<float>& input,
                                      bool want_hint, TeacherCache* cache = nullptr,
                                      const Hash128* key = nullptr) {
  if (teacher.mode() != NetMode::eval || teacher.dropout_at_eval())
    throw Error("teacher signals require eval mode with dropout inactive");
  int hint_idx = want_hint ? tap_layer_index(teacher.layers(), TapKind::hint) : -1;
  int split = first_dropout_index(teacher.layers());
  TeacherSignals sig;
  if (cache && key && split > 0) {
    Tensor<float> prefix =
        cache->get_or_compute(*key, [&] { return teacher.forward_range(input, 0, split); });
    if (hint_idx >= 0 && hint_idx < split)
      teacher.forward_range(input, 0, split, nullptr, hint_idx, &sig.hint);
    sig.logits = teacher.forward_range(prefix, split, teacher.layer_count(), nullptr,
                                       hint_idx >= split ? hint_idx : -1, &sig.hint);
  } else {
    sig.logits =
        teacher.forward_range(input, 0, teacher.layer_count(), nullptr, hint_idx, &sig.hint);
  }
  return sig;
}

// Target files: "DKGT", u16 version, u32 record count, then per record the
// 16-byte content hash, u16 dimension, f32 mean, the f32 row-major lower
// triangle of the Cholesky factor, f32 ridge epsilon and u32 sample count.
// Records are sorted by hash so identical stores serialize identically.

inline constexpr char kTargetsMagic[4] = {'D', 'K', 'G', 'T'};
inline constexpr std::uint16_t kTargetsVersion = 1;

struct TargetStore {
  std::unordered_map<Hash128, GaussianTarget<float>, Hash128Hasher> targets;

  const GaussianTarget<float>* find(const Hash128& key) const {
    auto it = targets.find(key);
    return it == targets.end() ? nullptr : &it->second;
  }
};

inline void save_targets(const TargetStore& store, const std::string& path,
                         const std::string& provenance = "") {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_bytes(os, kTargetsMagic, 4);
  write_u16(os, kTargetsVersion);
  write_u32(os, static_cast<std::uint32_t>(store.targets.size()));

  std::vector<const std::pair<const Hash128, GaussianTarget<float>>*> rows;
  rows.reserve(store.targets.size());
  for (const auto& kv : store.targets) rows.push_back(&kv);
  std::sort(rows.begin(), rows.end(),
            [](const auto* a, const auto* b) { return a->first < b->first; });

  for (const auto* row : rows) {
    const GaussianTarget<float>& t = row->second;
    const int d = t.dim();
    unsigned char hash_bytes[16];
    for (int i = 0; i < 8; ++i) hash_bytes[i] = (row->first.hi >> (8 * i)) & 0xff;
    for (int i = 0; i < 8; ++i) hash_bytes[8 + i] = (row->first.lo >> (8 * i)) & 0xff;
    write_bytes(os, hash_bytes, 16);
    write_u16(os, static_cast<std::uint16_t>(d));
    for (int i = 0; i < d; ++i) write_f32(os, t.mean(i));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j <= i; ++j) write_f32(os, t.chol(i, j));
    write_f32(os, t.epsilon);
    write_u32(os, static_cast<std::uint32_t>(t.sample_count));
  }
  if (!provenance.empty()) {
    write_bytes(os, "PROV", 4);
    write_u16(os, static_cast<std::uint16_t>(provenance.size()));
    write_bytes(os, provenance.data(), provenance.size());
  }
  os.flush();
  if (!os) throw FormatError("write failed for '" + path + "'");
}

struct LoadedTargets {
  TargetStore store;
  std::string provenance;
};

inline LoadedTargets load_targets(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  expect_magic(is, kTargetsMagic, "targets");
  std::uint16_t version = read_u16(is, "version");
  if (version != kTargetsVersion)
    throw FormatError("unsupported targets version " + std::to_string(version));
  std::uint32_t count = read_u32(is, "record count");

  LoadedTargets out;
  for (std::uint32_t r = 0; r < count; ++r) {
    unsigned char hash_bytes[16];
    read_bytes(is, hash_bytes, 16, "record hash");
    Hash128 key;
    for (int i = 0; i < 8; ++i) key.hi |= std::uint64_t(hash_bytes[i]) << (8 * i);
    for (int i = 0; i < 8; ++i) key.lo |= std::uint64_t(hash_bytes[8 + i]) << (8 * i);
    int d = read_u16(is, "dimension");
    if (d < 1 || d > 4096) throw FormatError("implausible target dimension " + std::to_string(d));
    GaussianTarget<float> t;
    t.mean.resize(d);
    for (int i = 0; i < d; ++i) t.mean(i) = read_f32(is, "mean");
    t.chol = SquareMat<float>::Zero(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j <= i; ++j) t.chol(i, j) = read_f32(is, "factor");
    t.epsilon = read_f32(is, "epsilon");
    t.sample_count = static_cast<int>(read_u32(is, "sample count"));
    if (!t.mean.allFinite() || !t.chol.allFinite())
      throw NumericError("non-finite target record");
    for (int i = 0; i < d; ++i)
      if (!(t.chol(i, i) > 0.0f))
        throw NumericError("target factor is not positive definite");
    if (!out.store.targets.emplace(key, std::move(t)).second)
      throw FormatError("duplicate target record " + key.hex());
  }
  char tail[4];
  is.read(tail, 4);
  std::streamsize got = is.gcount();
  if (got == 0) return out;
  if (got == 4 && std::memcmp(tail, "PROV", 4) == 0) {
    std::uint16_t len = read_u16(is, "provenance length");
    out.provenance.resize(len);
    if (len) read_bytes(is, out.provenance.data(), len, "provenance bytes");
    char extra;
    if (is.read(&extra, 1) && is.gcount() == 1)
      throw FormatError("trailing bytes after provenance block");
    return out;
  }
  throw FormatError("trailing bytes after last target record");
}

}  // namespace dk
