#include "povert/experiment.hpp"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include "povert/io.hpp"
#include "povert/loss.hpp"
#include "povert/warp.hpp"

namespace povert::bench {

namespace fs = std::filesystem;
using ad::Tensor;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

namespace {

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ','))
    if (!tok.empty()) out.push_back(std::stod(tok));
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ExperimentConfig parse_experiment_config(config::KeyValue& kv) {
  ExperimentConfig c;
  c.protocol = kv.get_string("protocol", "pose-benchmark");
  const std::set<std::string> protocols{"pose-benchmark", "ablation-init", "ablation-ldr",
                                        "baselines"};
  if (!protocols.count(c.protocol))
    throw ConfigError("unknown protocol '" + c.protocol + "'");
  c.runs = kv.get_int("runs", c.runs);
  if (c.runs < 1) throw ConfigError("runs must be >= 1");
  c.seed = kv.get_u64("seed", c.seed);
  c.out_dir = kv.get_string("out_dir", c.out_dir);
  c.threads = kv.get_int("threads", c.threads);
  c.precision = kv.get_string("precision", c.precision);
  if (c.precision != "f32" && c.precision != "f64")
    throw ConfigError("precision must be f32 or f64");
  c.target_mode = kv.get_string("target_mode", c.target_mode);
  if (c.target_mode != "in-domain" && c.target_mode != "out-of-domain")
    throw ConfigError("target_mode must be in-domain or out-of-domain");
  c.perturb_magnitude = kv.get_double("perturb_magnitude", c.perturb_magnitude);
  c.init_mode = kv.get_string("init_mode", c.init_mode);
  const std::set<std::string> inits{"estimator", "encoder-only", "grid", "mean", "gt",
                                    "estimator+grid"};
  if (!inits.count(c.init_mode)) throw ConfigError("unknown init_mode '" + c.init_mode + "'");
  c.tune = kv.get_bool("tune", c.tune);

  c.gen.image_size = kv.get_int("image_size", c.gen.image_size);
  c.gen.samples_per_ray = kv.get_int("samples_per_ray", c.gen.samples_per_ray);
  c.gen.z_dim = kv.get_int("z_dim", c.gen.z_dim);
  c.gen.w_dim = kv.get_int("w_dim", c.gen.w_dim);
  c.gen.field_width = kv.get_int("field_width", c.gen.field_width);
  c.gen.density_bias = kv.get_double("density_bias", c.gen.density_bias);
  c.gen.density_scale = kv.get_double("density_scale", c.gen.density_scale);
  c.gen.modulation_scale = kv.get_double("modulation_scale", c.gen.modulation_scale);
  c.gen.radius = kv.get_double("radius", c.gen.radius);
  c.gen.fov_deg = kv.get_double("fov_deg", c.gen.fov_deg);
  c.gen.jitter = kv.get_bool("jitter", c.gen.jitter);

  c.inv.max_iters_opt = kv.get_int("iters_opt", c.inv.max_iters_opt);
  c.inv.max_iters_pt = kv.get_int("iters_pt", c.inv.max_iters_pt);
  c.inv.lr_w = kv.get_double("lr_w", c.inv.lr_w);
  c.inv.lr_pose = kv.get_double("lr_pose", c.inv.lr_pose);
  c.inv.lr_noise = kv.get_double("lr_noise", c.inv.lr_noise);
  c.inv.lr_theta = kv.get_double("lr_theta", c.inv.lr_theta);
  c.inv.weights.warp = kv.get_double("lambda_warp", c.inv.weights.warp);
  c.inv.weights.noise = kv.get_double("lambda_noise", c.inv.weights.noise);
  c.inv.weights.l2 = kv.get_double("lambda_l2", c.inv.weights.l2);
  c.inv.weights.depth_reg = kv.get_double("lambda_dr", c.inv.weights.depth_reg);
  c.inv.weights.delta_reg = kv.get_double("lambda_reg", c.inv.weights.delta_reg);
  c.inv.weights.trans = kv.get_double("lambda_trans", c.inv.weights.trans);
  c.inv.weights.locality = kv.get_double("lambda_locality", c.inv.weights.locality);
  const std::string wv = kv.get_string("warp_variant", "target");
  if (wv == "target")
    c.inv.warp_variant = warp::WarpVariant::kAgainstTarget;
  else if (wv == "render")
    c.inv.warp_variant = warp::WarpVariant::kAgainstRender;
  else
    throw ConfigError("warp_variant must be target or render");
  const std::string pm = kv.get_string("pose_mode", "euler");
  if (pm == "euler")
    c.inv.pose_mode = field::PoseMode::kEuler;
  else if (pm == "sixd")
    c.inv.pose_mode = field::PoseMode::kSixD;
  else
    throw ConfigError("pose_mode must be euler or sixd");
  c.inv.convergence_tol = kv.get_double("convergence_tol", c.inv.convergence_tol);
  c.inv.patience = kv.get_int("patience", c.inv.patience);
  const std::string opt = kv.get_string("optimizer", "adam");
  if (opt == "adam")
    c.inv.optimizer.kind = diff::OptimizerKind::kAdam;
  else if (opt == "sgd")
    c.inv.optimizer.kind = diff::OptimizerKind::kSgd;
  else
    throw ConfigError("optimizer must be adam or sgd");
  c.inv.detach_canonical = kv.get_bool("detach_canonical", c.inv.detach_canonical);
  c.inv.simultaneous_updates = kv.get_bool("simultaneous_updates", c.inv.simultaneous_updates);
  c.inv.backtracking_guard = kv.get_bool("backtracking_guard", c.inv.backtracking_guard);
  c.inv.locality_enabled = kv.get_bool("locality", c.inv.locality_enabled);
  c.inv.locality_alpha = kv.get_double("locality_alpha", c.inv.locality_alpha);
  c.inv.box.yaw_max = kv.get_double("yaw_max", c.inv.box.yaw_max);
  c.inv.box.pitch_max = kv.get_double("pitch_max", c.inv.box.pitch_max);
  c.inv.box.t_max = kv.get_double("t_max", c.inv.box.t_max);

  c.pretrain_pairs = kv.get_int("pretrain_pairs", c.pretrain_pairs);
  c.holdout_pairs = kv.get_int("holdout_pairs", c.holdout_pairs);
  c.pose_epochs = kv.get_int("pose_epochs", c.pose_epochs);
  c.pose_lr = kv.get_double("pose_lr", c.pose_lr);
  c.encoder_pairs = kv.get_int("encoder_pairs", c.encoder_pairs);
  c.encoder_epochs = kv.get_int("encoder_epochs", c.encoder_epochs);
  c.encoder_lr = kv.get_double("encoder_lr", c.encoder_lr);
  c.train_batch = kv.get_int("train_batch", c.train_batch);
  c.avg_latent_samples = kv.get_int("avg_latent_samples", c.avg_latent_samples);
  c.grid_yaw = kv.get_int("grid_yaw", c.grid_yaw);
  c.grid_pitch = kv.get_int("grid_pitch", c.grid_pitch);
  if (kv.has("lambda_dr_values"))
    c.lambda_dr_values = parse_double_list(kv.get_string("lambda_dr_values", ""));
  else
    kv.declare("lambda_dr_values");

  kv.finish();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  config::KeyValue kv = config::KeyValue::load(path);
  return parse_experiment_config(kv);
}

std::string ExperimentConfig::snapshot() const {
  config::KeyValue kv;
  kv.set("protocol", protocol);
  kv.set("runs", std::to_string(runs));
  kv.set("seed", std::to_string(seed));
  kv.set("threads", std::to_string(threads));
  kv.set("precision", precision);
  kv.set("target_mode", target_mode);
  kv.set("perturb_magnitude", fmt(perturb_magnitude));
  kv.set("init_mode", init_mode);
  kv.set("tune", tune ? "true" : "false");
  kv.set("image_size", std::to_string(gen.image_size));
  kv.set("samples_per_ray", std::to_string(gen.samples_per_ray));
  kv.set("z_dim", std::to_string(gen.z_dim));
  kv.set("w_dim", std::to_string(gen.w_dim));
  kv.set("field_width", std::to_string(gen.field_width));
  kv.set("density_bias", fmt(gen.density_bias));
  kv.set("density_scale", fmt(gen.density_scale));
  kv.set("modulation_scale", fmt(gen.modulation_scale));
  kv.set("radius", fmt(gen.radius));
  kv.set("fov_deg", fmt(gen.fov_deg));
  kv.set("jitter", gen.jitter ? "true" : "false");
  kv.set("iters_opt", std::to_string(inv.max_iters_opt));
  kv.set("iters_pt", std::to_string(inv.max_iters_pt));
  kv.set("lr_w", fmt(inv.lr_w));
  kv.set("lr_pose", fmt(inv.lr_pose));
  kv.set("lr_noise", fmt(inv.lr_noise));
  kv.set("lr_theta", fmt(inv.lr_theta));
  kv.set("lambda_warp", fmt(inv.weights.warp));
  kv.set("lambda_noise", fmt(inv.weights.noise));
  kv.set("lambda_l2", fmt(inv.weights.l2));
  kv.set("lambda_dr", fmt(inv.weights.depth_reg));
  kv.set("lambda_reg", fmt(inv.weights.delta_reg));
  kv.set("lambda_trans", fmt(inv.weights.trans));
  kv.set("lambda_locality", fmt(inv.weights.locality));
  kv.set("warp_variant",
         inv.warp_variant == warp::WarpVariant::kAgainstTarget ? "target" : "render");
  kv.set("pose_mode", inv.pose_mode == field::PoseMode::kEuler ? "euler" : "sixd");
  kv.set("convergence_tol", fmt(inv.convergence_tol));
  kv.set("patience", std::to_string(inv.patience));
  kv.set("optimizer", inv.optimizer.kind == diff::OptimizerKind::kAdam ? "adam" : "sgd");
  kv.set("detach_canonical", inv.detach_canonical ? "true" : "false");
  kv.set("simultaneous_updates", inv.simultaneous_updates ? "true" : "false");
  kv.set("backtracking_guard", inv.backtracking_guard ? "true" : "false");
  kv.set("locality", inv.locality_enabled ? "true" : "false");
  kv.set("locality_alpha", fmt(inv.locality_alpha));
  kv.set("yaw_max", fmt(inv.box.yaw_max));
  kv.set("pitch_max", fmt(inv.box.pitch_max));
  kv.set("t_max", fmt(inv.box.t_max));
  kv.set("pretrain_pairs", std::to_string(pretrain_pairs));
  kv.set("holdout_pairs", std::to_string(holdout_pairs));
  kv.set("pose_epochs", std::to_string(pose_epochs));
  kv.set("pose_lr", fmt(pose_lr));
  kv.set("encoder_pairs", std::to_string(encoder_pairs));
  kv.set("encoder_epochs", std::to_string(encoder_epochs));
  kv.set("encoder_lr", fmt(encoder_lr));
  kv.set("train_batch", std::to_string(train_batch));
  kv.set("avg_latent_samples", std::to_string(avg_latent_samples));
  kv.set("grid_yaw", std::to_string(grid_yaw));
  kv.set("grid_pitch", std::to_string(grid_pitch));
  std::string ldr;
  for (std::size_t i = 0; i < lambda_dr_values.size(); ++i)
    ldr += (i ? "," : "") + fmt(lambda_dr_values[i]);
  kv.set("lambda_dr_values", ldr);
  return kv.serialize();
}

// ---------------------------------------------------------------------------
// Worker pool
// ---------------------------------------------------------------------------

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("POVERT_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

namespace {

/// Runs jobs on up to n threads; per-job exceptions are captured, not thrown.
void run_jobs(std::vector<std::function<void()>>& jobs, int threads,
              std::vector<std::string>& errors) {
  errors.assign(jobs.size(), "");
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      try {
        jobs[i]();
      } catch (const std::exception& e) {
        errors[i] = e.what();
      } catch (...) {
        errors[i] = "unknown error";
      }
    }
  };
  const int n = std::min<int>(threads, static_cast<int>(jobs.size()));
  if (n <= 1) {
    worker();
    return;
  }
  std::vector<std::thread> pool;
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// Shared per-experiment state
// ---------------------------------------------------------------------------

template <class T>
struct Setup {
  field::FieldParams<T> theta;
  Tensor<T> w_bar;
  bool have_estimators = false;
  pretrain::EstimatorParams<T> pose_est;
  pretrain::EstimatorParams<T> latent_enc;
  double holdout_yaw_err_median = -1;
  double holdout_pitch_err_median = -1;
};

template <class T>
Setup<T> prepare(ExperimentConfig& cfg) {
  cfg.gen.jitter_seed = derive_seed(cfg.seed, 0x717);
  Setup<T> s;
  s.theta = field::FieldParams<T>::random_init(cfg.gen, derive_seed(cfg.seed, 0x7E7A));
  s.w_bar = field::average_latent(s.theta, cfg.gen, cfg.avg_latent_samples,
                                  derive_seed(cfg.seed, 0xAB));

  const bool needs_estimators =
      cfg.init_mode == "estimator" || cfg.init_mode == "encoder-only" ||
      cfg.init_mode == "estimator+grid" || cfg.protocol == "ablation-init" ||
      cfg.protocol == "baselines";
  if (!needs_estimators) return s;

  auto train_set = pretrain::gen_pseudo_dataset(s.theta, cfg.gen, cfg.inv.box,
                                                cfg.pretrain_pairs,
                                                derive_seed(cfg.seed, 0xDA7A));
  auto holdout = pretrain::gen_pseudo_dataset(s.theta, cfg.gen, cfg.inv.box,
                                              cfg.holdout_pairs,
                                              derive_seed(cfg.seed, 0xE1D0));

  pretrain::EstimatorConfig arch;
  pretrain::TrainConfig tc;
  tc.epochs = cfg.pose_epochs;
  tc.batch_size = cfg.train_batch;
  tc.lr = cfg.pose_lr;
  tc.seed = derive_seed(cfg.seed, 0x90E5);
  tc.weights = cfg.inv.weights;
  auto pose_init = pretrain::EstimatorParams<T>::random_init(
      arch, cfg.gen.image_size, cfg.gen.w_dim, derive_seed(cfg.seed, 0xE571));
  s.pose_est =
      pretrain::train_pose_estimator(train_set, cfg.gen, std::move(pose_init), tc).params;

  std::vector<double> yerrs, perrs;
  for (const auto& pair : holdout) {
    camera::CameraPose est =
        pretrain::estimate_pose(s.pose_est, pair.image, cfg.inv.box, cfg.gen.radius);
    auto [ye, pe] = pose_angular_error(est, pair.pose);
    yerrs.push_back(ye);
    perrs.push_back(pe);
  }
  s.holdout_yaw_err_median = median(yerrs);
  s.holdout_pitch_err_median = median(perrs);

  pretrain::TrainConfig ec = tc;
  ec.epochs = cfg.encoder_epochs;
  ec.lr = cfg.encoder_lr;
  ec.batch_size = std::min(cfg.train_batch, 16);
  ec.seed = derive_seed(cfg.seed, 0xE5E2);
  std::vector<pretrain::PseudoPair<T>> enc_set(
      train_set.begin(),
      train_set.begin() + std::min<std::size_t>(train_set.size(), cfg.encoder_pairs));
  auto enc_init = pretrain::EstimatorParams<T>::random_init(
      arch, cfg.gen.image_size, cfg.gen.w_dim, derive_seed(cfg.seed, 0xE572));
  s.latent_enc =
      pretrain::train_latent_encoder(enc_set, s.theta, s.w_bar, cfg.gen, std::move(enc_init), ec)
          .params;
  s.have_estimators = true;
  return s;
}

// ---------------------------------------------------------------------------
// Targets, inits, artifact writing
// ---------------------------------------------------------------------------

template <class T>
struct TargetInstance {
  Tensor<T> image;
  Tensor<T> w_gt;
  camera::CameraPose pose_gt;
  field::FieldParams<T> theta_target;  // perturbed when out-of-domain
  std::uint64_t seed = 0;
};

template <class T>
TargetInstance<T> make_target(const Setup<T>& s, const ExperimentConfig& cfg, int run) {
  TargetInstance<T> t;
  t.seed = derive_seed(cfg.seed, 0x7A67E7 + static_cast<std::uint64_t>(run));
  t.w_gt = field::sample_latent(s.theta, cfg.gen, derive_seed(t.seed, 0));
  Rng prng(derive_seed(t.seed, 1));
  auto [yaw, pitch] = cfg.inv.box.sample_angles(prng);
  t.pose_gt.yaw = yaw;
  t.pose_gt.pitch = pitch;
  t.pose_gt.radius = cfg.gen.radius;
  t.theta_target = cfg.target_mode == "out-of-domain"
                       ? field::perturb_params(s.theta, cfg.perturb_magnitude,
                                               derive_seed(t.seed, 2))
                       : s.theta;
  t.image = field::render(t.w_gt, t.pose_gt, t.theta_target, cfg.gen).image;
  return t;
}

template <class T>
struct InitGuess {
  Tensor<T> w;
  camera::CameraPose pose;
};

template <class T>
InitGuess<T> make_init(const std::string& mode, const Setup<T>& s,
                       const TargetInstance<T>& t, const ExperimentConfig& cfg) {
  InitGuess<T> g;
  g.pose.radius = cfg.gen.radius;
  if (mode == "estimator") {
    g.w = pretrain::encode_latent(s.latent_enc, t.image, s.w_bar);
    g.pose = pretrain::estimate_pose(s.pose_est, t.image, cfg.inv.box, cfg.gen.radius);
  } else if (mode == "encoder-only") {
    g.w = pretrain::encode_latent(s.latent_enc, t.image, s.w_bar);
  } else if (mode == "grid") {
    loss::PerceptualProxy<T> proxy;
    g.w = s.w_bar;
    g.pose = pretrain::grid_init_pose(t.image, s.w_bar, s.theta, cfg.gen, proxy, cfg.inv.box,
                                      cfg.grid_yaw, cfg.grid_pitch);
  } else if (mode == "mean") {
    g.w = s.w_bar;
  } else if (mode == "gt") {
    g.w = s.w_bar;
    g.pose = t.pose_gt;
  } else {
    throw ConfigError("unknown init_mode '" + mode + "'");
  }
  return g;
}

/// First iteration (1-based) with both per-axis pose errors under 2 degrees;
/// the iteration budget when never reached.
int iters_to_pose_threshold(const std::vector<io::TraceRow>& trace,
                            const camera::CameraPose& gt, int budget,
                            double threshold_deg = 2.0) {
  const double rad = threshold_deg * M_PI / 180.0;
  double yaw = 0, pitch = 0;
  int have = 0;
  for (const auto& row : trace) {
    if (row.term == "yaw_rad") {
      yaw = row.value;
      have |= 1;
    } else if (row.term == "pitch_rad") {
      pitch = row.value;
      have |= 2;
      if (have == 3 && std::abs(yaw - gt.yaw) < rad && std::abs(pitch - gt.pitch) < rad)
        return row.iter + 1;
    }
  }
  return budget;
}

template <class T>
Tensor<float> to_f32(const Tensor<T>& t) {
  return t.template cast<float>();
}

std::string metrics_text(const std::map<std::string, double>& m) {
  std::ostringstream out;
  for (const auto& [k, v] : m) out << k << " " << fmt(v) << "\n";
  return out.str();
}

template <class T>
void write_run_artifacts(const std::string& dir, const ExperimentConfig& cfg,
                         const TargetInstance<T>& t, const invert::InversionResult<T>& res,
                         const Tensor<T>& pre_tune_image, const Tensor<T>& final_image,
                         const Tensor<T>& final_depth,
                         const std::map<std::string, double>& metrics) {
  fs::create_directories(dir);
  io::write_text(dir + "/config.cfg", cfg.snapshot());
  const Tensor<float> target32 = to_f32(t.image);
  io::write_png(dir + "/target.png", target32);
  io::save_tensor(dir + "/target.bin", "image", target32);
  const Tensor<float> final32 = to_f32(final_image);
  io::write_png(dir + "/final.png", final32);
  io::save_tensor(dir + "/final.bin", "image", final32);
  io::save_tensor(dir + "/final_depth.bin", "depth", to_f32(final_depth));
  io::save_tensor(dir + "/pre_tune.bin", "image", to_f32(pre_tune_image));
  io::write_pose(dir + "/pose.txt", res.pose);
  io::write_pose(dir + "/pose_gt.txt", t.pose_gt);
  io::save_tensor(dir + "/latent.bin", "latent", to_f32(res.w));
  io::save_tensor(dir + "/noise.bin", "noise", to_f32(res.noise));
  io::write_trace(dir + "/trace.txt", res.trace);
  io::write_text(dir + "/metrics.txt", metrics_text(metrics));
}

/// Standard image/pose metrics on f32-rounded data (what the artifacts hold).
template <class T>
std::map<std::string, double> standard_metrics(const Tensor<T>& target,
                                               const Tensor<T>& final_image,
                                               const Tensor<T>& final_depth,
                                               const camera::CameraPose& pose,
                                               const camera::CameraPose& pose_gt) {
  std::map<std::string, double> m;
  const Tensor<float> a = to_f32(target), b = to_f32(final_image);
  m["mse"] = mse(a, b);
  m["psnr"] = psnr(a, b);
  m["ssim"] = ssim(a, b);
  auto [ye, pe] = pose_angular_error(pose, pose_gt);
  m["yaw_err_deg"] = ye;
  m["pitch_err_deg"] = pe;
  {
    ad::Tape<float> tape;
    m["depth_smoothness"] =
        tape.val(loss::depth_smoothness(tape, tape.constant(to_f32(final_depth)))).value();
  }
  return m;
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

template <class T>
struct PipelineOutput {
  invert::InversionResult<T> result;
  Tensor<T> pre_tune_image;
  Tensor<T> final_image;
  Tensor<T> final_depth;
  double mse_pre_tune = 0;
};

template <class T>
PipelineOutput<T> run_full_method(const TargetInstance<T>& t, const InitGuess<T>& init,
                                  const Setup<T>& s, const ExperimentConfig& cfg) {
  invert::InversionConfig inv = cfg.inv;
  inv.seed = t.seed;
  invert::PivotResult<T> pivot =
      invert::optimize_pivot(t.image, init.w, init.pose, s.theta, cfg.gen, inv);

  PipelineOutput<T> out;
  out.result.w = pivot.w;
  out.result.pose = pivot.pose;
  out.result.noise = pivot.noise;
  out.result.theta = s.theta;
  out.result.trace = pivot.trace;
  out.result.pivot_iterations = pivot.iterations;
  out.result.pivot_converged_at = pivot.converged_at;

  field::RenderOutput<T> pre =
      field::render(pivot.w, pivot.pose, &pivot.noise, s.theta, cfg.gen);
  out.pre_tune_image = pre.image;
  out.mse_pre_tune = mse(to_f32(t.image), to_f32(pre.image));

  if (cfg.tune) {
    invert::TuneResult<T> tr = invert::pivotal_tune(t.image, pivot.w, pivot.pose,
                                                    pivot.noise, s.theta, cfg.gen, inv);
    out.result.theta = std::move(tr.theta);
    out.result.theta_tuned = true;
    for (auto& row : tr.trace)
      out.result.trace.push_back({row.iter, "pt_" + row.term, row.value});
  }
  field::RenderOutput<T> fin =
      field::render(out.result.w, out.result.pose, &out.result.noise, out.result.theta, cfg.gen);
  out.final_image = fin.image;
  out.final_depth = fin.depth;
  return out;
}

template <class T>
PipelineOutput<T> finish_baseline(const TargetInstance<T>& t, invert::InversionResult<T> res,
                                  const Setup<T>& s, const ExperimentConfig& cfg) {
  PipelineOutput<T> out;
  field::RenderOutput<T> pre = field::render(res.w, res.pose, &res.noise, s.theta, cfg.gen);
  out.pre_tune_image = pre.image;
  out.mse_pre_tune = mse(to_f32(t.image), to_f32(pre.image));
  field::RenderOutput<T> fin = field::render(res.w, res.pose, &res.noise, res.theta, cfg.gen);
  out.final_image = fin.image;
  out.final_depth = fin.depth;
  out.result = std::move(res);
  return out;
}

template <class T>
RunRecord finalize_run(const std::string& variant, const TargetInstance<T>& t,
                       const PipelineOutput<T>& po, const ExperimentConfig& cfg,
                       const std::string& run_dir) {
  RunRecord rec;
  rec.seed = t.seed;
  rec.variant = variant;
  rec.metrics = standard_metrics(t.image, po.final_image, po.final_depth, po.result.pose,
                                 t.pose_gt);
  rec.metrics["mse_pre_tune"] = po.mse_pre_tune;
  rec.metrics["pivot_iters"] = po.result.pivot_iterations;
  rec.metrics["converged_at"] = po.result.pivot_converged_at;
  rec.metrics["iters_to_pose_2deg"] = iters_to_pose_threshold(
      po.result.trace, t.pose_gt, cfg.inv.max_iters_opt);
  write_run_artifacts(run_dir, cfg, t, po.result, po.pre_tune_image, po.final_image,
                      po.final_depth, rec.metrics);
  return rec;
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

template <class T>
std::vector<RunRecord> run_one_seed(const ExperimentConfig& cfg, const Setup<T>& s, int run) {
  std::vector<RunRecord> records;
  TargetInstance<T> t = make_target(s, cfg, run);
  const std::string base = cfg.out_dir + "/runs/run_" + std::to_string(t.seed);

  auto full_with_init = [&](const std::string& variant, const std::string& init_mode) {
    InitGuess<T> init = make_init(init_mode, s, t, cfg);
    PipelineOutput<T> po = run_full_method(t, init, s, cfg);
    records.push_back(finalize_run(variant, t, po, cfg, base + "/" + variant));
  };

  if (cfg.protocol == "pose-benchmark") {
    if (cfg.init_mode == "estimator+grid") {
      full_with_init("full", "estimator");
      full_with_init("grid", "grid");
    } else {
      full_with_init("full", cfg.init_mode);
    }
  } else if (cfg.protocol == "ablation-init") {
    full_with_init("full", "estimator");
    full_with_init("enc-only", "encoder-only");
    {
      InitGuess<T> init = make_init("estimator", s, t, cfg);
      invert::InversionConfig inv = cfg.inv;
      inv.seed = t.seed;
      invert::InversionResult<T> res = invert::invert_joint_gradient(
          t.image, init.w, init.pose, s.theta, cfg.gen, inv, cfg.tune);
      PipelineOutput<T> po = finish_baseline(t, std::move(res), s, cfg);
      records.push_back(finalize_run("joint", t, po, cfg, base + "/joint"));
    }
  } else if (cfg.protocol == "ablation-ldr") {
    // One pivot per seed (latent fit at the configured init), then one tuning
    // pass per depth-regularization weight.
    InitGuess<T> init = make_init(cfg.init_mode, s, t, cfg);
    invert::InversionConfig inv = cfg.inv;
    inv.seed = t.seed;
    invert::PivotResult<T> pivot =
        invert::optimize_pivot(t.image, init.w, init.pose, s.theta, cfg.gen, inv);
    for (double ldr : cfg.lambda_dr_values) {
      invert::InversionConfig tune_cfg = inv;
      tune_cfg.weights.depth_reg = ldr;
      invert::TuneResult<T> tr = invert::pivotal_tune(t.image, pivot.w, pivot.pose,
                                                      pivot.noise, s.theta, cfg.gen, tune_cfg);
      PipelineOutput<T> po;
      po.result.w = pivot.w;
      po.result.pose = pivot.pose;
      po.result.noise = pivot.noise;
      po.result.theta = std::move(tr.theta);
      po.result.theta_tuned = true;
      po.result.trace = pivot.trace;
      for (auto& row : tr.trace)
        po.result.trace.push_back({row.iter, "pt_" + row.term, row.value});
      po.result.pivot_iterations = pivot.iterations;
      field::RenderOutput<T> pre =
          field::render(pivot.w, pivot.pose, &pivot.noise, s.theta, cfg.gen);
      po.pre_tune_image = pre.image;
      po.mse_pre_tune = mse(to_f32(t.image), to_f32(pre.image));
      field::RenderOutput<T> fin =
          field::render(pivot.w, pivot.pose, &pivot.noise, po.result.theta, cfg.gen);
      po.final_image = fin.image;
      po.final_depth = fin.depth;
      std::ostringstream label;
      label << "ldr_" << ldr;
      RunRecord rec = finalize_run(label.str(), t, po, cfg, base + "/" + label.str());
      rec.metrics["lambda_dr"] = ldr;
      io::write_text(base + "/" + label.str() + "/metrics.txt", metrics_text(rec.metrics));
      records.push_back(std::move(rec));
    }
  } else if (cfg.protocol == "baselines") {
    full_with_init("full", cfg.init_mode == "estimator+grid" ? "estimator" : cfg.init_mode);
    {
      InitGuess<T> init = make_init("mean", s, t, cfg);
      invert::InversionConfig inv = cfg.inv;
      inv.seed = t.seed;
      invert::InversionResult<T> res = invert::invert_gt_pose(t.image, t.pose_gt, init.w,
                                                              s.theta, cfg.gen, inv, cfg.tune);
      PipelineOutput<T> po = finish_baseline(t, std::move(res), s, cfg);
      records.push_back(finalize_run("gt-pose", t, po, cfg, base + "/gt-pose"));
    }
    {
      InitGuess<T> init = make_init(
          cfg.init_mode == "estimator+grid" ? "estimator" : cfg.init_mode, s, t, cfg);
      invert::InversionConfig inv = cfg.inv;
      inv.seed = t.seed;
      invert::InversionResult<T> res = invert::invert_joint_gradient(
          t.image, init.w, init.pose, s.theta, cfg.gen, inv, cfg.tune);
      PipelineOutput<T> po = finish_baseline(t, std::move(res), s, cfg);
      records.push_back(finalize_run("joint", t, po, cfg, base + "/joint"));
    }
  } else {
    throw ConfigError("unknown protocol '" + cfg.protocol + "'");
  }
  return records;
}

template <class T>
ExperimentReport run_experiment_t(ExperimentConfig cfg) {
  fs::create_directories(cfg.out_dir);
  io::write_text(cfg.out_dir + "/config.cfg", cfg.snapshot());
  Setup<T> s = prepare<T>(cfg);

  std::vector<std::vector<RunRecord>> per_run(cfg.runs);
  std::vector<std::function<void()>> jobs;
  for (int r = 0; r < cfg.runs; ++r)
    jobs.emplace_back([&, r]() { per_run[r] = run_one_seed<T>(cfg, s, r); });
  std::vector<std::string> errors;
  run_jobs(jobs, resolve_threads(cfg.threads), errors);

  ExperimentReport rep;
  rep.cfg = cfg;
  for (auto& rr : per_run)
    for (auto& rec : rr) rep.runs.push_back(std::move(rec));
  if (s.holdout_yaw_err_median >= 0)
    for (auto& rec : rep.runs) {
      rec.metrics["holdout_yaw_err_median"] = s.holdout_yaw_err_median;
      rec.metrics["holdout_pitch_err_median"] = s.holdout_pitch_err_median;
    }

  io::write_text(cfg.out_dir + "/report.txt", rep.table_text());
  io::write_text(cfg.out_dir + "/report.csv", rep.csv());
  io::write_text(cfg.out_dir + "/records.txt", rep.records_text());

  std::string failure;
  for (std::size_t i = 0; i < errors.size(); ++i)
    if (!errors[i].empty())
      failure += "run " + std::to_string(i) + ": " + errors[i] + "\n";
  if (!failure.empty()) throw RunFailure(failure);
  return rep;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  if (cfg.precision == "f64") return run_experiment_t<double>(cfg);
  return run_experiment_t<float>(cfg);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::vector<double> ExperimentReport::metric_of(const std::string& variant,
                                                const std::string& key) const {
  std::vector<double> out;
  for (const auto& r : runs) {
    if (r.variant != variant) continue;
    auto it = r.metrics.find(key);
    if (it != r.metrics.end()) out.push_back(it->second);
  }
  return out;
}

namespace {

std::vector<RunRecord> sorted_runs(const std::vector<RunRecord>& runs) {
  std::vector<RunRecord> s = runs;
  std::sort(s.begin(), s.end(), [](const RunRecord& a, const RunRecord& b) {
    return std::tie(a.variant, a.seed) < std::tie(b.variant, b.seed);
  });
  return s;
}

}  // namespace

std::string ExperimentReport::table_text() const {
  std::set<std::string> variants, keys;
  for (const auto& r : runs) {
    variants.insert(r.variant);
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  }
  std::ostringstream out;
  out << "protocol: " << cfg.protocol << "  runs: " << cfg.runs << "\n";
  for (const auto& v : variants) {
    out << "\n[" << v << "]\n";
    for (const auto& k : keys) {
      const std::vector<double> vals = metric_of(v, k);
      if (vals.empty()) continue;
      const Aggregate a = aggregate(vals);
      char line[256];
      std::snprintf(line, sizeof(line),
                    "  %-26s mean %-12.6g median %-12.6g p10 %-12.6g p90 %-12.6g\n",
                    k.c_str(), a.mean, a.median, a.p10, a.p90);
      out << line;
    }
  }
  return out.str();
}

std::string ExperimentReport::csv() const {
  std::set<std::string> keys;
  for (const auto& r : runs)
    for (const auto& [k, v] : r.metrics) keys.insert(k);
  std::ostringstream out;
  out << "seed,variant";
  for (const auto& k : keys) out << "," << k;
  out << "\n";
  for (const auto& r : sorted_runs(runs)) {
    out << r.seed << "," << r.variant;
    for (const auto& k : keys) {
      out << ",";
      auto it = r.metrics.find(k);
      if (it != r.metrics.end()) out << fmt(it->second);
    }
    out << "\n";
  }
  return out.str();
}

std::string ExperimentReport::records_text() const {
  std::ostringstream out;
  for (const auto& r : sorted_runs(runs))
    for (const auto& [k, v] : r.metrics)
      out << r.seed << " " << r.variant << " " << k << " " << fmt(v) << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Recompute from artifacts
// ---------------------------------------------------------------------------

std::map<std::string, double> recompute_run_metrics(const std::string& run_dir) {
  const Tensor<float> target = io::load_tensor<float>(run_dir + "/target.bin", "image");
  const Tensor<float> final_img = io::load_tensor<float>(run_dir + "/final.bin", "image");
  const Tensor<float> depth = io::load_tensor<float>(run_dir + "/final_depth.bin", "depth");
  const Tensor<float> pre = io::load_tensor<float>(run_dir + "/pre_tune.bin", "image");
  const camera::CameraPose pose = io::read_pose(run_dir + "/pose.txt");
  const camera::CameraPose pose_gt = io::read_pose(run_dir + "/pose_gt.txt");

  std::map<std::string, double> m;
  m["mse"] = mse(target, final_img);
  m["psnr"] = psnr(target, final_img);
  m["ssim"] = ssim(target, final_img);
  auto [ye, pe] = pose_angular_error(pose, pose_gt);
  m["yaw_err_deg"] = ye;
  m["pitch_err_deg"] = pe;
  {
    ad::Tape<float> tape;
    m["depth_smoothness"] =
        tape.val(loss::depth_smoothness(tape, tape.constant(depth))).value();
  }
  m["mse_pre_tune"] = mse(target, pre);
  return m;
}

std::map<std::string, double> parse_metrics_file(const std::string& path) {
  std::istringstream in(io::read_text(path));
  std::map<std::string, double> out;
  std::string key;
  double value;
  while (in >> key >> value) out[key] = value;
  return out;
}

}  // namespace povert::bench
