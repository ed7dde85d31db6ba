// Command-line front end: dataset generation, teacher/student training,
// confidence-target precomputation, evaluation and channel extraction.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "distillkit/distillkit.hpp"

namespace fs = std::filesystem;

namespace {

// Exit codes: 0 success, 1 usage/config problems, 2 runtime failures.
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Overrides {
  std::string config_path;
  std::string mode;
  std::string out;
  std::optional<std::uint64_t> seed;
};

dk::Config load_effective_config(const Overrides& ov) {
  dk::Config cfg = dk::load_config(ov.config_path);
  if (!ov.mode.empty()) cfg.mode = ov.mode;
  if (!ov.out.empty()) cfg.out_dir = ov.out;
  if (ov.seed) {
    cfg.seed_data = *ov.seed;
    cfg.seed_init = *ov.seed + 1;
    cfg.seed_dropout = *ov.seed + 2;
  }
  return cfg;
}

/// Advisory lock on a directory; concurrent runs writing the same place fail
/// fast instead of interleaving artifacts.
class DirLock {
 public:
  explicit DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".lock").string();
    fd_ = ::open(path_.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
    if (fd_ < 0) throw dk::Error("cannot open lock file '" + path_ + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw dk::Error("another run holds '" + dir + "' (lock file " + path_ + ")");
    }
  }
  ~DirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::string path_;
  int fd_ = -1;
};

std::string resolve_out(const dk::Config& cfg, const std::string& name) {
  if (name.find('/') != std::string::npos || (!name.empty() && name[0] == '/')) return name;
  return (fs::path(cfg.out_dir) / name).string();
}

std::string manifest_path(const dk::Config& cfg) {
  return (fs::path(cfg.data_dir) / "manifest.txt").string();
}

dk::LoadedData load_data(const dk::Config& cfg) {
  dk::LoadedData data = dk::load_manifest(manifest_path(cfg), cfg.patch_size);
  for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
  return data;
}

void write_train_log(const std::string& path, const std::string& cfg_hash,
                     const std::vector<dk::EpochLog>& log) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw dk::FormatError("cannot open log '" + path + "' for writing");
  os << "# config_hash=" << cfg_hash << "\n";
  os << "# " << dk::EpochLog::header() << "\n";
  for (const auto& el : log) os << el.line() << "\n";
  os.flush();
  if (!os) throw dk::FormatError("log write failed for '" + path + "'");
}

double pct(double fraction) { return 100.0 * fraction; }

struct KvBlock {
  std::vector<std::pair<std::string, std::string>> rows;
  void add(const std::string& k, const std::string& v) { rows.emplace_back(k, v); }
  void add(const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    rows.emplace_back(k, buf);
  }
  void add(const std::string& k, long v) { rows.emplace_back(k, std::to_string(v)); }
  void print() const {
    std::cout << "---\n";
    for (const auto& [k, v] : rows) std::cout << k << "=" << v << "\n";
  }
};

class WallClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

dk::Network<float> load_net(const std::string& path, const std::vector<int>& input_shape) {
  return dk::load_weights(path, input_shape).net;
}

int cmd_gen(const dk::Config& cfg) {
  WallClock clock;
  dk::validate_config(cfg);
  DirLock lock(cfg.data_dir);
  const std::string hash = dk::config_hash(cfg);
  dk::Dataset train = dk::generate_toy(cfg.train_pos, cfg.train_neg, cfg.patch_size,
                                       cfg.noise_level, cfg.seed_data, dk::Split::train);
  dk::Dataset val = dk::generate_toy(cfg.val_pos, cfg.val_neg, cfg.patch_size, cfg.noise_level,
                                     cfg.seed_data + 1, dk::Split::val);
  dk::Dataset test = dk::generate_toy(cfg.test_pos, cfg.test_neg, cfg.patch_size, cfg.noise_level,
                                      cfg.seed_data + 2, dk::Split::test);
  dk::save_dataset({&train, &val, &test}, cfg.data_dir, hash);

  std::cout << "generated toy corpus in " << cfg.data_dir << "\n"
            << "  train: " << train.patches.size() << " patches (" << cfg.train_pos << " pos, "
            << cfg.train_neg << " neg)\n"
            << "  val:   " << val.patches.size() << " patches\n"
            << "  test:  " << test.patches.size() << " patches\n"
            << "  patch: " << cfg.patch_size << "x" << cfg.patch_size << ", noise "
            << cfg.noise_level << "\n";
  KvBlock kv;
  kv.add("command", "gen");
  kv.add("train_patches", long(train.patches.size()));
  kv.add("val_patches", long(val.patches.size()));
  kv.add("test_patches", long(test.patches.size()));
  kv.add("wall_seconds", clock.seconds());
  kv.add("config_hash", hash);
  kv.print();
  return 0;
}

int cmd_train_teacher(const dk::Config& cfg) {
  WallClock clock;
  dk::Config tcfg = cfg;
  tcfg.mode = "direct";
  tcfg.input = "rgb";
  tcfg.student_arch = cfg.teacher_arch;  // the teacher is trained directly
  dk::validate_config(tcfg);

  DirLock lock(cfg.out_dir);
  dk::LoadedData data = load_data(cfg);
  dk::TrainResult result =
      dk::train(tcfg, nullptr, data.splits[dk::Split::train], data.splits[dk::Split::val]);

  const std::string hash = dk::config_hash(cfg);
  const std::string weights_path = resolve_out(cfg, cfg.teacher_weights);
  dk::save_weights(result.net, weights_path, "config_hash=" + hash);
  const std::string log_path = resolve_out(cfg, "teacher_" + cfg.log_file);
  write_train_log(log_path, hash, result.log);

  dk::EvalResult test = dk::evaluate(result.net, data.splits[dk::Split::test], dk::InputKind::rgb);
  std::cout << "teacher trained (" << result.net.param_total() << " params, "
            << result.log.size() << " epochs)\n"
            << "  best epoch " << result.best_epoch << ": val_error " << pct(result.best_val_error)
            << "%\n"
            << "  test: accuracy " << pct(test.accuracy) << "%  lamr " << pct(test.lamr) << "%\n"
            << "  weights: " << weights_path << "\n  log: " << log_path << "\n";
  KvBlock kv;
  kv.add("command", "train-teacher");
  kv.add("teacher_params", result.net.param_total());
  kv.add("best_epoch", long(result.best_epoch));
  kv.add("val_error", result.best_val_error);
  kv.add("test_accuracy", test.accuracy);
  kv.add("test_lamr_percent", pct(test.lamr));
  kv.add("wall_seconds", clock.seconds());
  kv.add("config_hash", hash);
  kv.print();
  return 0;
}

int cmd_precompute_targets(const dk::Config& cfg) {
  WallClock clock;
  dk::validate_config(cfg);
  DirLock lock(cfg.out_dir);
  dk::LoadedData data = load_data(cfg);
  if (data.splits[dk::Split::train].patches.empty())
    throw dk::Error("no training patches to precompute targets for");

  dk::Network<float> teacher =
      load_net(resolve_out(cfg, cfg.teacher_weights), dk::input_shape_for(dk::InputKind::rgb, cfg.patch_size));
  dk::TapKind tap = dk::resolve_conf_source(cfg);
  dk::TeacherCache cache;
  dk::TargetStore store = dk::build_target_store(teacher, data.splits[dk::Split::train], tap,
                                                 cfg.mc_samples, cfg.seed_dropout, &cache);

  const std::string hash = dk::config_hash(cfg);
  const std::string path = resolve_out(cfg, cfg.targets_file);
  dk::save_targets(store, path, "config_hash=" + hash);

  int dim = store.targets.empty() ? 0 : store.targets.begin()->second.dim();
  std::cout << "precomputed " << store.targets.size() << " confidence targets (dim " << dim
            << ", " << cfg.mc_samples << " passes each, source "
            << (tap == dk::TapKind::hint ? "hint" : "logits") << ")\n"
            << "  file: " << path << "\n";
  KvBlock kv;
  kv.add("command", "precompute-targets");
  kv.add("records", long(store.targets.size()));
  kv.add("dimension", long(dim));
  kv.add("mc_samples", long(cfg.mc_samples));
  kv.add("wall_seconds", clock.seconds());
  kv.add("config_hash", hash);
  kv.print();
  return 0;
}

int cmd_distill(const dk::Config& cfg) {
  WallClock clock;
  dk::ValidatedConfig v = dk::validate_config(cfg);
  DirLock lock(cfg.out_dir);
  dk::LoadedData data = load_data(cfg);

  const bool needs_teacher =
      v.mode == dk::Mode::kd || v.mode == dk::Mode::hint || v.mode == dk::Mode::hint_conf;
  const bool needs_targets = v.mode == dk::Mode::conf || v.mode == dk::Mode::hint_conf;

  std::optional<dk::Network<float>> teacher;
  const std::string teacher_path = resolve_out(cfg, cfg.teacher_weights);
  if (needs_teacher || (needs_targets && !fs::exists(resolve_out(cfg, cfg.targets_file))) ||
      fs::exists(teacher_path)) {
    if (!fs::exists(teacher_path) && (needs_teacher || needs_targets))
      throw dk::Error("mode " + cfg.mode + " needs teacher weights at '" + teacher_path +
                      "' (run train-teacher first)");
    if (fs::exists(teacher_path))
      teacher = load_net(teacher_path, dk::input_shape_for(dk::InputKind::rgb, cfg.patch_size));
  }

  const std::string hash = dk::config_hash(cfg);
  std::optional<dk::TargetStore> targets;
  if (needs_targets) {
    const std::string targets_path = resolve_out(cfg, cfg.targets_file);
    if (fs::exists(targets_path)) {
      dk::LoadedTargets lt = dk::load_targets(targets_path);
      if (!lt.provenance.empty() && lt.provenance != "config_hash=" + hash)
        std::cerr << "warning: targets file '" << targets_path
                  << "' was produced under a different configuration\n";
      targets = std::move(lt.store);
    } else {
      std::cerr << "note: no targets file; sampling teacher (" << cfg.mc_samples
                << " passes per patch)\n";
      dk::TeacherCache precache;
      targets = dk::build_target_store(*teacher, data.splits[dk::Split::train],
                                       dk::resolve_conf_source(cfg), cfg.mc_samples,
                                       cfg.seed_dropout, &precache);
      dk::save_targets(*targets, targets_path, "config_hash=" + hash);
    }
  }

  dk::TeacherCache cache;
  dk::TrainResult result = dk::train(cfg, teacher ? &*teacher : nullptr,
                                     data.splits[dk::Split::train], data.splits[dk::Split::val],
                                     targets ? &*targets : nullptr, &cache);

  const std::string weights_path = resolve_out(cfg, cfg.student_weights);
  dk::save_weights(result.net, weights_path, "config_hash=" + hash);
  const std::string log_path = resolve_out(cfg, cfg.log_file);
  write_train_log(log_path, hash, result.log);

  dk::Split eval_split = dk::split_from_string(cfg.eval_split);
  dk::EvalResult ev = dk::evaluate(result.net, data.splits[eval_split], v.input);

  std::cout << "student trained in mode " << cfg.mode << " (" << result.net.param_total()
            << " params)\n";
  if (teacher) {
    double ratio = double(teacher->param_total()) / double(result.net.param_total());
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", ratio);
    std::cout << "  teacher: " << teacher->param_total() << " params; compression " << buf
              << "x\n";
  }
  std::cout << "  T=" << cfg.temperature << "  lambda=" << cfg.lambda << "  N=" << cfg.mc_samples
            << "\n"
            << "  best epoch " << result.best_epoch << ": val_error " << pct(result.best_val_error)
            << "%\n"
            << "  " << cfg.eval_split << ": accuracy " << pct(ev.accuracy) << "%  error "
            << pct(ev.error_rate) << "%  auc " << ev.auc << "  lamr " << pct(ev.lamr) << "%\n"
            << "  weights: " << weights_path << "\n  log: " << log_path << "\n"
            << "  wall: " << clock.seconds() << " s\n";
  KvBlock kv;
  kv.add("command", "distill");
  kv.add("mode", cfg.mode);
  kv.add("input", cfg.input);
  kv.add("temperature", cfg.temperature);
  kv.add("lambda", cfg.lambda);
  kv.add("mc_samples", long(cfg.mc_samples));
  kv.add("student_params", result.net.param_total());
  if (teacher) {
    kv.add("teacher_params", teacher->param_total());
    kv.add("compression", double(teacher->param_total()) / double(result.net.param_total()));
  }
  kv.add("best_epoch", long(result.best_epoch));
  kv.add("val_error", result.best_val_error);
  kv.add("eval_split", cfg.eval_split);
  kv.add("accuracy", ev.accuracy);
  kv.add("error", ev.error_rate);
  kv.add("auc", ev.auc);
  kv.add("lamr_percent", pct(ev.lamr));
  kv.add("wall_seconds", clock.seconds());
  kv.add("config_hash", hash);
  kv.print();
  return 0;
}

int cmd_eval(const dk::Config& cfg) {
  WallClock clock;
  dk::ValidatedConfig v = dk::validate_config(cfg);
  dk::LoadedData data = load_data(cfg);
  dk::Split split = dk::split_from_string(cfg.eval_split);
  if (data.splits[split].patches.empty())
    throw dk::Error("split '" + cfg.eval_split + "' is empty");

  dk::Network<float> student = load_net(resolve_out(cfg, cfg.student_weights),
                                        dk::input_shape_for(v.input, cfg.patch_size));
  dk::EvalResult ev = dk::evaluate(student, data.splits[split], v.input);

  std::cout << "eval on " << cfg.eval_split << " (" << ev.count << " patches)\n"
            << "  accuracy " << pct(ev.accuracy) << "%  error " << pct(ev.error_rate) << "%  auc "
            << ev.auc << "  lamr " << pct(ev.lamr) << "%\n";
  KvBlock kv;
  kv.add("command", "eval");
  kv.add("eval_split", cfg.eval_split);
  kv.add("patches", long(ev.count));
  kv.add("accuracy", ev.accuracy);
  kv.add("error", ev.error_rate);
  kv.add("auc", ev.auc);
  kv.add("lamr_percent", pct(ev.lamr));
  kv.add("student_params", student.param_total());
  kv.add("wall_seconds", clock.seconds());
  kv.add("config_hash", dk::config_hash(cfg));
  kv.print();
  return 0;
}

int cmd_acf(const std::string& input, std::string output) {
  WallClock clock;
  if (output.empty()) output = fs::path(input).replace_extension(".dkac").string();
  dk::RgbPatch img = dk::read_ppm(input);
  dk::AcfPatch channels = dk::extract_acf(img);
  dk::save_acf(channels, output);
  std::cout << "channels written: " << output << " (" << dk::kAcfPlanes << " planes, "
            << channels.rows << "x" << channels.cols << " from " << img.rows << "x" << img.cols
            << ")\n";
  KvBlock kv;
  kv.add("command", "acf");
  kv.add("planes", long(dk::kAcfPlanes));
  kv.add("rows", long(channels.rows));
  kv.add("cols", long(channels.cols));
  kv.add("wall_seconds", clock.seconds());
  kv.print();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"knowledge-distillation toolkit for compressed pedestrian classifiers"};
  app.require_subcommand(1);

  Overrides ov;
  std::string acf_in, acf_out;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", ov.config_path, "run configuration file");
    if (needs_config) opt->required();
    sub->add_option("--mode", ov.mode, "override the training mode");
    sub->add_option("--seed", ov.seed,
                    "override seeds: data/init/dropout become N, N+1, N+2");
    sub->add_option("--out", ov.out, "override the output directory");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate the synthetic patch corpus");
  add_common(gen, true);
  CLI::App* teach = app.add_subcommand("train-teacher", "train the teacher network directly");
  add_common(teach, true);
  CLI::App* pre = app.add_subcommand("precompute-targets",
                                     "sample the teacher and store confidence targets");
  add_common(pre, true);
  CLI::App* dist = app.add_subcommand("distill", "train a student under the configured mode");
  add_common(dist, true);
  CLI::App* ev = app.add_subcommand("eval", "evaluate stored student weights on a split");
  add_common(ev, true);
  CLI::App* acf = app.add_subcommand("acf", "convert a PPM image to the channel format");
  acf->add_option("input", acf_in, "input PPM image")->required();
  acf->add_option("--out-file", acf_out, "output channel file (default: input with .dkac)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (acf->parsed()) return cmd_acf(acf_in, acf_out);
    dk::Config cfg = load_effective_config(ov);
    if (gen->parsed()) return cmd_gen(cfg);
    if (teach->parsed()) return cmd_train_teacher(cfg);
    if (pre->parsed()) return cmd_precompute_targets(cfg);
    if (dist->parsed()) return cmd_distill(cfg);
    if (ev->parsed()) return cmd_eval(cfg);
    std::cerr << "no subcommand\n";
    return kExitUsage;
  } catch (const dk::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const dk::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
