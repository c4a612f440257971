#pragma once

#include "p23d/common.hpp"
#include "p23d/field.hpp"
#include "p23d/geomloss.hpp"
#include "p23d/guidance.hpp"
#include "p23d/render.hpp"
#include "p23d/spatial.hpp"

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace p23d {

struct TrainConfig {
  double lambda_point = 5e-6;
  double lambda_sds = 1.0;
  double lambda_sparse = 5e-4;
  int iterations = 5000;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  // Multiplies the total gradient before the optimizer. Adam is invariant to
  // this except through eps.
  double loss_scale = 1.0;
  // Per-group multipliers on lr. 0 freezes a group.
  double density_lr_scale = 1.0, latent_lr_scale = 1.0, background_lr_scale = 1.0;
  int batch_size = 32768;   // P_nerf queries per step
  int pc_every = 1;         // point loss applied when iteration % pc_every == 0
  std::uint64_t seed = 0;
  int checkpoint_every = 0; // 0 disables intermediate checkpoints

  void validate() const;
};

struct FieldConfig {
  Resolution resolution{128, 128, 128};
  Aabb bounds{{-1, -1, -1}, {1, 1, 1}};
  double density_scale = 0.0; // <= 0 means 1 / voxel_edge
  FieldInit init;
};

struct GuideConfig {
  bool normalize = false; // fit the cloud into field.bounds first
  double margin = 0.9;
  int upsample_q = 20;
  int upsample_n = 2;
  double dedup_epsilon = -1.0; // < 0 picks the default relative epsilon
};

/// Everything a `fit` run needs. Relative paths are resolved against the
/// directory of the config file.
struct RunConfig {
  std::string guide_ply;
  std::string target_latent;
  std::string bridge_address;
  std::string out_dir = "run";
  std::string prompt;
  int threads = 0;

  FieldConfig field;
  GuideConfig guide;
  TrainConfig trainer;
  GeomLossConfig geomloss;
  CameraSamplerConfig camera;
  int samples_per_ray = 96;

  void validate() const;
};

/// Defaults as a JSON document; its leaves define the set of valid keys.
std::string default_config_json();
/// Every valid dotted key, sorted.
std::vector<std::string> valid_config_keys();
/// Parses a JSON config over the defaults, then applies `key=value`
/// overrides (dotted paths; values parsed as JSON, falling back to a string).
/// Unknown keys are rejected with the full valid-key list.
RunConfig parse_run_config(const std::string &json_text, const std::vector<std::string> &overrides = {},
                           const std::string &base_dir = "");
RunConfig load_run_config(const std::string &path, const std::vector<std::string> &overrides = {});
std::string run_config_to_json(const RunConfig &cfg);

/// S points, one uniform sample in each of S cells of a jittered lattice
/// over `bounds` (cells picked with a random offset when S is not a cube).
std::vector<Vec3> sample_query_points(Rng &rng, const Aabb &bounds, std::size_t S);

struct AdamWGroup {
  std::span<double> params;
  std::span<const double> grads;
  std::span<double> m, v;
  double lr_scale = 1.0;
};

/// One decoupled-weight-decay Adam step over every group. `step` is the
/// 1-based index of this update (bias correction).
void adamw_update(std::span<const AdamWGroup> groups, std::int64_t step, const TrainConfig &cfg);

class AdamW {
public:
  explicit AdamW(const VoxelField &field);
  void step(VoxelField &field, const FieldGradients &grads, const TrainConfig &cfg);
  std::int64_t steps() const { return steps_; }
  const FieldGradients &first_moment() const { return m_; }
  const FieldGradients &second_moment() const { return v_; }

private:
  FieldGradients m_, v_;
  std::int64_t steps_ = 0;
};

struct StepReport {
  int iteration = 0;
  double loss_pc = 0.0, loss_sparse = 0.0, loss_sds = 0.0, loss_total = 0.0;
  double grad_norm_pc = 0.0, grad_norm_sds = 0.0, grad_norm_sparse = 0.0, grad_norm_total = 0.0;
  std::size_t soft = 0, zero = 0, ignore = 0;
  double mean_coverage = 0.0;
  // wall-clock milliseconds; excluded from reproducibility comparisons
  double ms_render = 0.0, ms_guidance = 0.0, ms_point = 0.0, ms_backprop = 0.0, ms_total = 0.0;
};

/// Unscaled per-term gradients of one step and their weighted sum.
struct StepGradients {
  FieldGradients pc, sds, sparse, total;
  StepReport report;
};

/// Owns the field and optimizer state for one optimization run.
class Trainer {
public:
  Trainer(VoxelField field, std::shared_ptr<const NearestNeighborIndex> guide, GuidanceProvider *provider,
          RunConfig cfg);

  /// Steps (1)-(6) of an iteration without touching the parameters.
  StepGradients compute_gradients(int iteration);
  /// A full iteration including the optimizer update.
  StepReport step();

  int iteration() const { return iteration_; }
  const VoxelField &field() const { return field_; }
  VoxelField &field_mut() { return field_; }
  const AdamW &optimizer() const { return adam_; }
  const RunConfig &config() const { return cfg_; }
  /// Camera and render settings (jittered, per-iteration seed) used for a
  /// given iteration.
  Camera camera_for(int iteration) const;
  RenderSettings render_settings_for(int iteration) const;

private:
  VoxelField field_;
  std::shared_ptr<const NearestNeighborIndex> guide_;
  GuidanceProvider *provider_;
  RunConfig cfg_;
  AdamW adam_;
  int iteration_ = 0;
};

/// Point-cloud guidance loss on a query batch, with its gradient w.r.t. raw
/// density accumulated into `grads` (scaled by `scale`).
struct PointLossReport {
  double loss = 0.0;
  std::size_t soft = 0, zero = 0, ignore = 0;
};
PointLossReport point_loss_gradient(const VoxelField &field, const NearestNeighborIndex &guide,
                                    std::span<const Vec3> queries, const GeomLossConfig &cfg,
                                    FieldGradients &grads, double scale = 1.0);

std::string step_report_json(const StepReport &r, bool with_timing = true);

/// Loads, optionally normalizes, and upsamples the guide cloud.
PointCloud prepare_guide(const RunConfig &cfg);

struct FitResult {
  VoxelField field;
  std::vector<StepReport> reports;
  std::size_t guide_points = 0;
};

/// Full run: guide preparation, field init, provider setup, `iterations`
/// steps, metrics.jsonl, periodic checkpoints and final.p23d under out_dir.
FitResult fit(const RunConfig &cfg, const std::function<void(const StepReport &)> &on_step = {});

/// Field initialisation described by the config (density_scale resolved).
VoxelField make_initial_field(const RunConfig &cfg);

} // namespace p23d
