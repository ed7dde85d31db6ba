#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "distillkit/confidence.hpp"
#include "distillkit/data.hpp"
#include "distillkit/hash.hpp"
#include "distillkit/layers.hpp"

namespace dk {

enum class Mode { direct, kd, conf, hint, hint_conf };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::direct: return "direct";
    case Mode::kd: return "kd";
    case Mode::conf: return "conf";
    case Mode::hint: return "hint";
    case Mode::hint_conf: return "hint_conf";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "direct") return Mode::direct;
  if (s == "kd") return Mode::kd;
  if (s == "conf") return Mode::conf;
  if (s == "hint") return Mode::hint;
  if (s == "hint_conf") return Mode::hint_conf;
  throw ConfigError("unknown mode '" + s + "'");
}

/// Flat key=value run configuration. Defaults reproduce the reference
/// training recipe; every key can be overridden from file or CLI.
struct Config {
  std::string mode = "direct";
  std::string input = "rgb";
  std::string conf_source = "auto";  // auto | logits | hint

  double temperature = 2.0;
  double lambda = 0.5;
  bool t_squared_scaling = false;
  int mc_samples = 200;

  int epochs = 70;
  int batch_size = 16;
  std::string pos_ratio = "1:3";
  double lr = 0.01;
  double lr_drop_factor = 5.0;
  int lr_drop_every = 20;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double flip_prob = 0.5;
  int max_batches_per_epoch = 0;  // 0 = run the sampler dry

  int patch_size = 32;
  double noise_level = 0.15;
  int train_pos = 500, train_neg = 1500;
  int val_pos = 125, val_neg = 375;
  int test_pos = 125, test_neg = 375;

  std::uint64_t seed_data = 1, seed_init = 2, seed_dropout = 3;

  std::string teacher_arch =
      "conv(3,14,3,2,1) relu conv(14,28,3,2,1) relu conv(28,52,3,2,1) relu "
      "conv(52,60,3,1,1) relu avgpool dropout(0.5) dense(60,64) relu dense(64,2)";
  std::string student_arch = "auto";

  std::string data_dir = "data";
  std::string out_dir = "out";
  std::string teacher_weights = "teacher.dkwt";
  std::string targets_file = "targets.dkgt";
  std::string student_weights = "student.dkwt";
  std::string log_file = "train.log";
  std::string eval_split = "test";
};

namespace cfgdetail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  std::size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

struct Field {
  std::string name;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs a finite number, got '" + v + "'");
  }
}

inline long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long n = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    unsigned long long n = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs an unsigned integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "' needs true/false, got '" + v + "'");
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    auto str = [&](const char* name, std::string Config::*member) {
      f.push_back({name, [member](const Config& c) { return c.*member; },
                   [member](Config& c, const std::string& v) { c.*member = v; }});
    };
    auto num = [&](const char* name, double Config::*member) {
      f.push_back({name, [member](const Config& c) { return fmt_double(c.*member); },
                   [member, name](Config& c, const std::string& v) {
                     c.*member = parse_double(name, v);
                   }});
    };
    auto integer = [&](const char* name, int Config::*member) {
      f.push_back({name, [member](const Config& c) { return std::to_string(c.*member); },
                   [member, name](Config& c, const std::string& v) {
                     c.*member = int(parse_int(name, v));
                   }});
    };
    auto u64 = [&](const char* name, std::uint64_t Config::*member) {
      f.push_back({name, [member](const Config& c) { return std::to_string(c.*member); },
                   [member, name](Config& c, const std::string& v) {
                     c.*member = parse_u64(name, v);
                   }});
    };
    auto boolean = [&](const char* name, bool Config::*member) {
      f.push_back({name, [member](const Config& c) { return c.*member ? "true" : "false"; },
                   [member, name](Config& c, const std::string& v) {
                     c.*member = parse_bool(name, v);
                   }});
    };

    str("mode", &Config::mode);
    str("input", &Config::input);
    str("conf_source", &Config::conf_source);
    num("temperature", &Config::temperature);
    num("lambda", &Config::lambda);
    boolean("t_squared_scaling", &Config::t_squared_scaling);
    integer("mc_samples", &Config::mc_samples);
    integer("epochs", &Config::epochs);
    integer("batch_size", &Config::batch_size);
    str("pos_ratio", &Config::pos_ratio);
    num("lr", &Config::lr);
    num("lr_drop_factor", &Config::lr_drop_factor);
    integer("lr_drop_every", &Config::lr_drop_every);
    num("momentum", &Config::momentum);
    num("weight_decay", &Config::weight_decay);
    num("flip_prob", &Config::flip_prob);
    integer("max_batches_per_epoch", &Config::max_batches_per_epoch);
    integer("patch_size", &Config::patch_size);
    num("noise_level", &Config::noise_level);
    integer("train_pos", &Config::train_pos);
    integer("train_neg", &Config::train_neg);
    integer("val_pos", &Config::val_pos);
    integer("val_neg", &Config::val_neg);
    integer("test_pos", &Config::test_pos);
    integer("test_neg", &Config::test_neg);
    u64("seed_data", &Config::seed_data);
    u64("seed_init", &Config::seed_init);
    u64("seed_dropout", &Config::seed_dropout);
    str("teacher_arch", &Config::teacher_arch);
    str("student_arch", &Config::student_arch);
    str("data_dir", &Config::data_dir);
    str("out_dir", &Config::out_dir);
    str("teacher_weights", &Config::teacher_weights);
    str("targets_file", &Config::targets_file);
    str("student_weights", &Config::student_weights);
    str("log_file", &Config::log_file);
    str("eval_split", &Config::eval_split);
    return f;
  }();
  return table;
}

}  // namespace cfgdetail

/// Applies `key = value` lines (# comments, blank lines allowed). Unknown or
/// repeated keys are hard errors.
inline void apply_config_text(Config& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  std::map<std::string, int> seen;
  while (std::getline(is, line)) {
    ++line_no;
    std::string t = cfgdetail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + " is not key = value: '" +
                        line + "'");
    std::string key = cfgdetail::trim(t.substr(0, eq));
    std::string value = cfgdetail::trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + " has no key");
    if (++seen[key] > 1)
      throw ConfigError("config key '" + key + "' appears more than once");
    bool matched = false;
    for (const auto& f : cfgdetail::fields()) {
      if (f.name == key) {
        f.set(cfg, value);
        matched = true;
        break;
      }
    }
    if (!matched) throw ConfigError("unknown config key '" + key + "'");
  }
}

inline Config load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  Config cfg;
  apply_config_text(cfg, buf.str());
  return cfg;
}

/// Canonical text form: every key, fixed order. Parsing the output yields an
/// identical configuration, and its hash identifies the run.
inline std::string serialize_config(const Config& cfg) {
  std::ostringstream os;
  for (const auto& f : cfgdetail::fields()) os << f.name << " = " << f.get(cfg) << "\n";
  return os.str();
}

inline std::string config_hash(const Config& cfg) { return hash128(serialize_config(cfg)).hex(); }

struct PosRatio {
  int pos = 1, neg = 3;
};

inline PosRatio parse_pos_ratio(const std::string& s) {
  auto colon = s.find(':');
  if (colon == std::string::npos)
    throw ConfigError("pos_ratio must look like '1:3', got '" + s + "'");
  PosRatio r;
  r.pos = int(cfgdetail::parse_int("pos_ratio", cfgdetail::trim(s.substr(0, colon))));
  r.neg = int(cfgdetail::parse_int("pos_ratio", cfgdetail::trim(s.substr(colon + 1))));
  if (r.pos < 1 || r.neg < 1) throw ConfigError("pos_ratio parts must be positive");
  return r;
}

/// Student architecture resolved for the input encoding when left on "auto".
inline std::string resolve_student_arch(const Config& cfg) {
  if (cfg.student_arch != "auto") return cfg.student_arch;
  if (cfg.input == "acf")
    return "conv(10,8,3,1,1) relu maxpool(2,2) conv(8,12,3,1,1) relu avgpool "
           "dense(12,64) relu dense(64,2)";
  return "conv(3,6,3,1,1) relu maxpool(2,2) conv(6,12,3,1,1) relu maxpool(2,2) avgpool "
         "dense(12,64) relu dense(64,2)";
}

inline TapKind resolve_conf_source(const Config& cfg) {
  if (cfg.conf_source == "logits") return TapKind::logits;
  if (cfg.conf_source == "hint") return TapKind::hint;
  if (cfg.conf_source != "auto")
    throw ConfigError("conf_source must be auto, logits or hint; got '" + cfg.conf_source + "'");
  return mode_from_string(cfg.mode) == Mode::hint_conf ? TapKind::hint : TapKind::logits;
}

/// Cross-field validation; throws ConfigError on the first contradiction.
/// Returns the parsed teacher/student stacks for reuse.
struct ValidatedConfig {
  Mode mode = Mode::direct;
  InputKind input = InputKind::rgb;
  TapKind conf_source = TapKind::logits;
  PosRatio ratio;
  std::vector<LayerSpec> teacher_arch;
  std::vector<LayerSpec> student_arch;
  std::vector<int> teacher_input_shape;
  std::vector<int> student_input_shape;
};

inline ValidatedConfig validate_config(const Config& cfg) {
  ValidatedConfig v;
  v.mode = mode_from_string(cfg.mode);
  v.input = input_kind_from_string(cfg.input);
  v.ratio = parse_pos_ratio(cfg.pos_ratio);

  if (!(cfg.temperature > 0)) throw ConfigError("temperature must be positive");
  if (cfg.lambda < 0) throw ConfigError("lambda must be non-negative");
  if (cfg.mc_samples < 2) throw ConfigError("mc_samples must be at least 2");
  if (cfg.epochs < 1) throw ConfigError("epochs must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (cfg.batch_size % (v.ratio.pos + v.ratio.neg) != 0)
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) +
                      " is not divisible by pos_ratio " + cfg.pos_ratio);
  if (!(cfg.lr > 0)) throw ConfigError("lr must be positive");
  if (!(cfg.lr_drop_factor > 0)) throw ConfigError("lr_drop_factor must be positive");
  if (cfg.lr_drop_every < 1) throw ConfigError("lr_drop_every must be positive");
  if (cfg.momentum < 0 || cfg.momentum >= 1) throw ConfigError("momentum must lie in [0,1)");
  if (cfg.weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (cfg.flip_prob < 0 || cfg.flip_prob > 1) throw ConfigError("flip_prob must lie in [0,1]");
  if (cfg.max_batches_per_epoch < 0) throw ConfigError("max_batches_per_epoch must be >= 0");
  if (cfg.patch_size < 8 || cfg.patch_size % 4 != 0)
    throw ConfigError("patch_size must be >= 8 and divisible by 4");
  if (cfg.noise_level < 0) throw ConfigError("noise_level must be non-negative");
  for (int n : {cfg.train_pos, cfg.train_neg, cfg.val_pos, cfg.val_neg, cfg.test_pos, cfg.test_neg})
    if (n < 1) throw ConfigError("per-split patch counts must be positive");
  split_from_string(cfg.eval_split);

  v.teacher_input_shape = input_shape_for(InputKind::rgb, cfg.patch_size);
  v.student_input_shape = input_shape_for(v.input, cfg.patch_size);

  v.teacher_arch = arch_from_string(cfg.teacher_arch);
  v.student_arch = arch_from_string(resolve_student_arch(cfg));

  // Dry-run shape inference so contradictions surface before any training.
  auto check_stack = [](const std::vector<LayerSpec>& specs, std::vector<int> shape,
                        const char* who) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      try {
        shape = infer_shape(specs[i], shape);
      } catch (const ShapeError& e) {
        throw ConfigError(std::string(who) + " architecture: layer " + std::to_string(i) + ": " +
                          e.what());
      }
    }
    if (shape != std::vector<int>{2})
      throw ConfigError(std::string(who) + " architecture must end in a two-class head, got " +
                        shape_string(shape));
  };
  check_stack(v.teacher_arch, v.teacher_input_shape, "teacher");
  check_stack(v.student_arch, v.student_input_shape, "student");

  v.conf_source = resolve_conf_source(cfg);

  const bool needs_hint_pair = v.mode == Mode::hint || v.mode == Mode::hint_conf ||
                               ((v.mode == Mode::conf) && v.conf_source == TapKind::hint);
  if (needs_hint_pair) {
    int ti = hint_dense_index(v.teacher_arch);
    int si = hint_dense_index(v.student_arch);
    if (ti < 0) throw ConfigError("teacher architecture has no guidance layer (two dense layers)");
    if (si < 0) throw ConfigError("student architecture has no guidance layer (two dense layers)");
    int tw = v.teacher_arch[std::size_t(ti)].out;
    int sw = v.student_arch[std::size_t(si)].out;
    if (tw != sw)
      throw ConfigError("guidance widths differ: teacher " + std::to_string(tw) + ", student " +
                        std::to_string(sw));
    const LayerSpec& tf = v.teacher_arch[std::size_t(final_dense_index(v.teacher_arch))];
    const LayerSpec& sf = v.student_arch[std::size_t(final_dense_index(v.student_arch))];
    if (tf.in != sf.in || tf.out != sf.out)
      throw ConfigError("final dense layers differ; the shared output stage cannot be copied");
  }
  if (v.mode == Mode::conf || v.mode == Mode::hint_conf) {
    int d = 2;
    if (v.conf_source == TapKind::hint) {
      int si = hint_dense_index(v.student_arch);
      if (si < 0) throw ConfigError("student architecture has no guidance layer");
      d = v.student_arch[std::size_t(si)].out;
    }
    if (cfg.mc_samples <= d)
      throw ConfigError("mc_samples (" + std::to_string(cfg.mc_samples) +
                        ") must exceed the observed dimension (" + std::to_string(d) + ")");
    if (first_dropout_index(v.teacher_arch) < 0)
      throw ConfigError("confidence targets need a teacher with a dropout layer");
  }
  if (v.mode != Mode::direct) {
    // All teacher-led modes compare logits over the same two classes; widths
    // were pinned to 2 above for both stacks.
  }
  return v;
}

}  // namespace dk
