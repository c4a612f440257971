#include "p23d/trainer.hpp"

#include "p23d/pointcloud.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace p23d {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_error(const std::string &msg) { throw Error("trainer", "config", msg); }

std::uint64_t mix(std::uint64_t seed, std::uint64_t iteration, std::uint64_t stream) {
  Rng r(seed ^ (iteration * 0x9e3779b97f4a7c15ULL) ^ (stream * 0xd1b54a32d192ed03ULL));
  r.next_u64();
  return r.next_u64();
}

enum Stream : std::uint64_t { kCamera = 1, kRender = 2, kQuery = 3 };

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

json vec_json(const Vec3 &v) { return json::array({v.x, v.y, v.z}); }

Vec3 json_vec(const json &j, const std::string &key) {
  if (!j.is_array() || j.size() != 3) {
    config_error(key + " must be an array of 3 numbers");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json config_to_json(const RunConfig &c) {
  const auto &t = c.trainer;
  const auto &f = c.field;
  const auto &cam = c.camera;
  return json{
      {"guide_ply", c.guide_ply},
      {"target_latent", c.target_latent},
      {"bridge_address", c.bridge_address},
      {"out_dir", c.out_dir},
      {"prompt", c.prompt},
      {"threads", c.threads},
      {"field",
       {{"resolution", f.resolution},
        {"bounds_min", vec_json(f.bounds.lo)},
        {"bounds_max", vec_json(f.bounds.hi)},
        {"density_scale", f.density_scale},
        {"init",
         {{"mode", f.init.mode == FieldInit::Mode::Constant ? "constant" : "blob"},
          {"sigma0", f.init.sigma0},
          {"center", vec_json(f.init.center)},
          {"radius", f.init.radius},
          {"peak", f.init.peak}}}}},
      {"guide",
       {{"normalize", c.guide.normalize},
        {"margin", c.guide.margin},
        {"upsample_q", c.guide.upsample_q},
        {"upsample_n", c.guide.upsample_n},
        {"dedup_epsilon", c.guide.dedup_epsilon}}},
      {"trainer",
       {{"lambda_point", t.lambda_point},
        {"lambda_sds", t.lambda_sds},
        {"lambda_sparse", t.lambda_sparse},
        {"iterations", t.iterations},
        {"lr", t.lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"weight_decay", t.weight_decay},
        {"loss_scale", t.loss_scale},
        {"density_lr_scale", t.density_lr_scale},
        {"latent_lr_scale", t.latent_lr_scale},
        {"background_lr_scale", t.background_lr_scale},
        {"batch_size", t.batch_size},
        {"pc_every", t.pc_every},
        {"seed", t.seed},
        {"checkpoint_every", t.checkpoint_every}}},
      {"geomloss",
       {{"tau1", c.geomloss.tau1},
        {"tau2", c.geomloss.tau2},
        {"delta", c.geomloss.delta},
        {"eps", c.geomloss.clamp_eps}}},
      {"render", {{"samples_per_ray", c.samples_per_ray}}},
      {"camera",
       {{"radius_min", cam.radius_min},
        {"radius_max", cam.radius_max},
        {"elevation_min", cam.elevation_min},
        {"elevation_max", cam.elevation_max},
        {"azimuth_min", cam.azimuth_min},
        {"azimuth_max", cam.azimuth_max},
        {"fov_base", cam.fov_base},
        {"fov_jitter_min", cam.fov_jitter_min},
        {"fov_jitter_max", cam.fov_jitter_max},
        {"near", cam.near},
        {"far", cam.far},
        {"width", cam.width},
        {"height", cam.height},
        {"target", vec_json(cam.target)}}},
  };
}

RunConfig config_from_json(const json &j) {
  RunConfig c;
  try {
    c.guide_ply = j.at("guide_ply").get<std::string>();
    c.target_latent = j.at("target_latent").get<std::string>();
    c.bridge_address = j.at("bridge_address").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    c.prompt = j.at("prompt").get<std::string>();
    c.threads = j.at("threads").get<int>();

    const auto &f = j.at("field");
    const auto &res = f.at("resolution");
    if (!res.is_array() || res.size() != 3) {
      config_error("field.resolution must be an array of 3 integers");
    }
    c.field.resolution = {res[0].get<int>(), res[1].get<int>(), res[2].get<int>()};
    c.field.bounds = {json_vec(f.at("bounds_min"), "field.bounds_min"), json_vec(f.at("bounds_max"), "field.bounds_max")};
    c.field.density_scale = f.at("density_scale").get<double>();
    const auto &init = f.at("init");
    const auto mode = init.at("mode").get<std::string>();
    if (mode == "constant") {
      c.field.init.mode = FieldInit::Mode::Constant;
    } else if (mode == "blob") {
      c.field.init.mode = FieldInit::Mode::Blob;
    } else {
      config_error("field.init.mode must be \"constant\" or \"blob\", got \"" + mode + "\"");
    }
    c.field.init.sigma0 = init.at("sigma0").get<double>();
    c.field.init.center = json_vec(init.at("center"), "field.init.center");
    c.field.init.radius = init.at("radius").get<double>();
    c.field.init.peak = init.at("peak").get<double>();

    const auto &g = j.at("guide");
    c.guide.normalize = g.at("normalize").get<bool>();
    c.guide.margin = g.at("margin").get<double>();
    c.guide.upsample_q = g.at("upsample_q").get<int>();
    c.guide.upsample_n = g.at("upsample_n").get<int>();
    c.guide.dedup_epsilon = g.at("dedup_epsilon").get<double>();

    const auto &t = j.at("trainer");
    c.trainer.lambda_point = t.at("lambda_point").get<double>();
    c.trainer.lambda_sds = t.at("lambda_sds").get<double>();
    c.trainer.lambda_sparse = t.at("lambda_sparse").get<double>();
    c.trainer.iterations = t.at("iterations").get<int>();
    c.trainer.lr = t.at("lr").get<double>();
    c.trainer.beta1 = t.at("beta1").get<double>();
    c.trainer.beta2 = t.at("beta2").get<double>();
    c.trainer.eps = t.at("eps").get<double>();
    c.trainer.weight_decay = t.at("weight_decay").get<double>();
    c.trainer.loss_scale = t.at("loss_scale").get<double>();
    c.trainer.density_lr_scale = t.at("density_lr_scale").get<double>();
    c.trainer.latent_lr_scale = t.at("latent_lr_scale").get<double>();
    c.trainer.background_lr_scale = t.at("background_lr_scale").get<double>();
    c.trainer.batch_size = t.at("batch_size").get<int>();
    c.trainer.pc_every = t.at("pc_every").get<int>();
    c.trainer.seed = t.at("seed").get<std::uint64_t>();
    c.trainer.checkpoint_every = t.at("checkpoint_every").get<int>();

    const auto &gl = j.at("geomloss");
    c.geomloss.tau1 = gl.at("tau1").get<double>();
    c.geomloss.tau2 = gl.at("tau2").get<double>();
    c.geomloss.delta = gl.at("delta").get<double>();
    c.geomloss.clamp_eps = gl.at("eps").get<double>();

    c.samples_per_ray = j.at("render").at("samples_per_ray").get<int>();

    const auto &cam = j.at("camera");
    c.camera.radius_min = cam.at("radius_min").get<double>();
    c.camera.radius_max = cam.at("radius_max").get<double>();
    c.camera.elevation_min = cam.at("elevation_min").get<double>();
    c.camera.elevation_max = cam.at("elevation_max").get<double>();
    c.camera.azimuth_min = cam.at("azimuth_min").get<double>();
    c.camera.azimuth_max = cam.at("azimuth_max").get<double>();
    c.camera.fov_base = cam.at("fov_base").get<double>();
    c.camera.fov_jitter_min = cam.at("fov_jitter_min").get<double>();
    c.camera.fov_jitter_max = cam.at("fov_jitter_max").get<double>();
    c.camera.near = cam.at("near").get<double>();
    c.camera.far = cam.at("far").get<double>();
    c.camera.width = cam.at("width").get<int>();
    c.camera.height = cam.at("height").get<int>();
    c.camera.target = json_vec(cam.at("target"), "camera.target");
  } catch (const json::exception &e) {
    config_error(std::string("bad value type: ") + e.what());
  }
  return c;
}

void collect_keys(const json &j, const std::string &prefix, std::vector<std::string> &out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      collect_keys(*it, key, out);
    } else {
      out.push_back(key);
    }
  }
}

std::string key_list() {
  std::string s;
  for (const auto &k : valid_config_keys()) {
    s += (s.empty() ? "" : ", ") + k;
  }
  return s;
}

bool same_kind(const json &a, const json &b) {
  if (a.is_number() && b.is_number()) {
    return true;
  }
  return a.type() == b.type();
}

void merge_into(json &base, const json &user, const std::string &prefix) {
  if (!user.is_object()) {
    config_error((prefix.empty() ? std::string("config") : prefix) + " must be a JSON object");
  }
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) {
      config_error("unknown key '" + key + "'; valid keys: " + key_list());
    }
    json &slot = base[it.key()];
    if (slot.is_object()) {
      merge_into(slot, *it, key);
    } else {
      if (!same_kind(slot, *it)) {
        config_error("key '" + key + "' expects " + slot.type_name() + ", got " + it->type_name());
      }
      slot = *it;
    }
  }
}

void apply_override(json &base, const std::string &assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    config_error("override '" + assignment + "' must be key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception &) {
    parsed = value;
  }
  json *node = &base;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) {
    parts.push_back(part);
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) {
      config_error("unknown key '" + key + "'; valid keys: " + key_list());
    }
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) {
    config_error("override '" + key + "' names a section, not a value; valid keys: " + key_list());
  }
  if (!same_kind(*node, parsed)) {
    // "--set out_dir=123" should still set a string
    if (node->is_string()) {
      parsed = value;
    } else {
      config_error("key '" + key + "' expects " + std::string(node->type_name()) + ", got '" + value + "'");
    }
  }
  *node = parsed;
}

std::string resolve_path(const std::string &p, const std::string &base_dir) {
  if (p.empty() || base_dir.empty() || fs::path(p).is_absolute()) {
    return p;
  }
  return (fs::path(base_dir) / p).lexically_normal().string();
}

} // namespace

void TrainConfig::validate() const {
  if (lambda_point < 0 || lambda_sds < 0 || lambda_sparse < 0) {
    config_error("loss weights must be >= 0");
  }
  if (iterations < 0) {
    config_error("trainer.iterations must be >= 0");
  }
  if (!(lr > 0)) {
    config_error("trainer.lr must be > 0");
  }
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0) || weight_decay < 0) {
    config_error("AdamW needs 0 <= beta < 1, eps > 0, weight_decay >= 0");
  }
  if (!(loss_scale > 0) || !std::isfinite(loss_scale)) {
    config_error("trainer.loss_scale must be finite and > 0");
  }
  if (density_lr_scale < 0 || latent_lr_scale < 0 || background_lr_scale < 0) {
    config_error("lr scales must be >= 0");
  }
  if (batch_size < 1 || pc_every < 1 || checkpoint_every < 0) {
    config_error("trainer.batch_size and trainer.pc_every must be >= 1, checkpoint_every >= 0");
  }
}

void RunConfig::validate() const {
  trainer.validate();
  geomloss.validate();
  camera.validate();
  for (int n : field.resolution) {
    if (n < 2) {
      config_error("field.resolution must be >= 2 on every axis");
    }
  }
  const Vec3 e = field.bounds.extent();
  if (!(e.x > 0 && e.y > 0 && e.z > 0)) {
    config_error("field bounds must have positive extent");
  }
  if (samples_per_ray < 1) {
    config_error("render.samples_per_ray must be >= 1");
  }
  if (guide.upsample_q < 1 || guide.upsample_n < 0) {
    config_error("guide.upsample_q must be >= 1 and guide.upsample_n >= 0");
  }
  if (threads < 0) {
    config_error("threads must be >= 0");
  }
}

std::string default_config_json() { return config_to_json(RunConfig{}).dump(2); }

std::vector<std::string> valid_config_keys() {
  std::vector<std::string> keys;
  collect_keys(config_to_json(RunConfig{}), "", keys);
  std::sort(keys.begin(), keys.end());
  return keys;
}

RunConfig parse_run_config(const std::string &json_text, const std::vector<std::string> &overrides,
                           const std::string &base_dir) {
  json user;
  try {
    user = json::parse(json_text);
  } catch (const json::exception &e) {
    config_error(std::string("invalid JSON: ") + e.what());
  }
  json merged = config_to_json(RunConfig{});
  merge_into(merged, user, "");
  for (const auto &o : overrides) {
    apply_override(merged, o);
  }
  RunConfig c = config_from_json(merged);
  c.guide_ply = resolve_path(c.guide_ply, base_dir);
  c.target_latent = resolve_path(c.target_latent, base_dir);
  c.out_dir = resolve_path(c.out_dir, base_dir);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string &path, const std::vector<std::string> &overrides) {
  std::ifstream in(path);
  if (!in) {
    config_error(path + ": cannot open config");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), overrides, fs::path(path).parent_path().string());
}

std::string run_config_to_json(const RunConfig &cfg) { return config_to_json(cfg).dump(2); }

std::vector<Vec3> sample_query_points(Rng &rng, const Aabb &bounds, std::size_t S) {
  std::vector<Vec3> out;
  if (S == 0) {
    return out;
  }
  std::size_t m = static_cast<std::size_t>(std::ceil(std::cbrt(static_cast<double>(S))));
  while (m > 1 && (m - 1) * (m - 1) * (m - 1) >= S) {
    --m;
  }
  while (m * m * m < S) {
    ++m;
  }
  const std::size_t cells = m * m * m;
  const Vec3 cell = bounds.extent() / static_cast<double>(m);
  const double offset = rng.uniform();
  out.reserve(S);
  for (std::size_t i = 0; i < S; ++i) {
    std::size_t c = static_cast<std::size_t>((static_cast<double>(i) + offset) * static_cast<double>(cells) /
                                             static_cast<double>(S));
    c = std::min(c, cells - 1);
    const std::size_t ix = c % m, iy = (c / m) % m, iz = c / (m * m);
    const double ux = rng.uniform(), uy = rng.uniform(), uz = rng.uniform();
    out.push_back({bounds.lo.x + (static_cast<double>(ix) + ux) * cell.x,
                   bounds.lo.y + (static_cast<double>(iy) + uy) * cell.y,
                   bounds.lo.z + (static_cast<double>(iz) + uz) * cell.z});
  }
  return out;
}

void adamw_update(std::span<const AdamWGroup> groups, std::int64_t step, const TrainConfig &cfg) {
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (const auto &g : groups) {
    if (g.params.size() != g.grads.size() || g.m.size() != g.params.size() || g.v.size() != g.params.size()) {
      throw Error("trainer", "shape", "AdamW group shapes differ");
    }
    const double lr = cfg.lr * g.lr_scale;
    const double decay = 1.0 - lr * cfg.weight_decay;
    const std::size_t n = g.params.size();
    parallel_for(n, 1 << 15, [&](std::size_t b, std::size_t e) {
      for (std::size_t i = b; i < e; ++i) {
        const double gi = g.grads[i];
        g.m[i] = cfg.beta1 * g.m[i] + (1.0 - cfg.beta1) * gi;
        g.v[i] = cfg.beta2 * g.v[i] + (1.0 - cfg.beta2) * gi * gi;
        if (lr == 0.0) {
          continue;
        }
        const double mhat = g.m[i] / bc1;
        const double vhat = g.v[i] / bc2;
        g.params[i] = g.params[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    });
  }
}

AdamW::AdamW(const VoxelField &field) : m_(field), v_(field) {}

void AdamW::step(VoxelField &field, const FieldGradients &grads, const TrainConfig &cfg) {
  if (!grads.compatible(field) || !m_.compatible(field)) {
    throw Error("trainer", "shape", "gradients do not match the field");
  }
  ++steps_;
  Latent bg_params = field.background();
  const AdamWGroup groups[] = {
      {field.raw_density_mut(), grads.raw_density, m_.raw_density, v_.raw_density, cfg.density_lr_scale},
      {field.latent_mut(), grads.latent, m_.latent, v_.latent, cfg.latent_lr_scale},
      {bg_params, grads.background, m_.background, v_.background, cfg.background_lr_scale},
  };
  adamw_update(groups, steps_, cfg);
  field.background_mut() = bg_params;
}

PointLossReport point_loss_gradient(const VoxelField &field, const NearestNeighborIndex &guide,
                                    std::span<const Vec3> queries, const GeomLossConfig &cfg,
                                    FieldGradients &grads, double scale) {
  PointLossReport rep;
  if (queries.empty()) {
    return rep;
  }
  // Beyond (1 - tau2) of the half extent every query is labelled Zero, so
  // distances past a margin above that cutoff need not be exact.
  const double cutoff = 1.5 * (1.0 - cfg.tau2) * 0.5 * field.bounds().max_extent();
  const DistanceBatch d = nearest_distance_batch(guide, queries, cutoff);
  const DistanceBatch dn = normalize_distances(d, field.bounds());
  const OccupancyTarget targets = target_occupancy(dn, cfg);
  const double delta = cfg.delta > 0 ? cfg.delta : field.voxel_edge();

  const std::size_t n = queries.size();
  std::vector<SigmaSample> samples(n);
  std::vector<double> alpha(n), dalpha(n);
  parallel_for(n, 1024, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) {
      samples[i] = sample_sigma(field, queries[i]);
      const PointAlpha pa = point_alpha(samples[i].sigma, delta);
      alpha[i] = pa.alpha;
      dalpha[i] = pa.dalpha_dsigma;
    }
  });
  const PointLoss pl = point_cloud_loss(alpha, targets, cfg);
  rep.loss = pl.loss;
  rep.soft = targets.soft_count;
  rep.zero = targets.zero_count;
  rep.ignore = targets.ignore_count;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = pl.dloss_dalpha[i];
    if (g == 0.0 || !samples[i].stencil.valid) {
      continue;
    }
    const double graw = scale * g * dalpha[i] * samples[i].dsigma_draw;
    const Stencil &s = samples[i].stencil;
    for (int c = 0; c < 8; ++c) {
      grads.raw_density[s.index[c]] += s.weight[c] * graw;
    }
  }
  return rep;
}

Trainer::Trainer(VoxelField field, std::shared_ptr<const NearestNeighborIndex> guide, GuidanceProvider *provider,
                 RunConfig cfg)
    : field_(std::move(field)), guide_(std::move(guide)), provider_(provider), cfg_(std::move(cfg)),
      adam_(field_) {
  cfg_.trainer.validate();
  if (cfg_.trainer.lambda_point > 0 && !guide_) {
    throw Error("trainer", "config", "lambda_point > 0 needs a guide point cloud");
  }
  if (cfg_.trainer.lambda_sds > 0 && provider_ == nullptr) {
    throw Error("trainer", "config", "lambda_sds > 0 needs a guidance provider (target_latent or bridge_address)");
  }
}

Camera Trainer::camera_for(int iteration) const {
  Rng rng(mix(cfg_.trainer.seed, static_cast<std::uint64_t>(iteration), kCamera));
  return sample_camera(rng, cfg_.camera);
}

RenderSettings Trainer::render_settings_for(int iteration) const {
  RenderSettings rs;
  rs.samples_per_ray = cfg_.samples_per_ray;
  rs.near = cfg_.camera.near;
  rs.far = cfg_.camera.far;
  rs.jitter = true;
  rs.seed = mix(cfg_.trainer.seed, static_cast<std::uint64_t>(iteration), kRender);
  return rs;
}

StepGradients Trainer::compute_gradients(int iteration) {
  using clock = std::chrono::steady_clock;
  const auto t_start = clock::now();
  const TrainConfig &tc = cfg_.trainer;
  StepGradients sg{FieldGradients(field_), FieldGradients(field_), FieldGradients(field_), FieldGradients(field_), {}};
  StepReport &rep = sg.report;
  rep.iteration = iteration;

  const bool need_render = tc.lambda_sds > 0 || tc.lambda_sparse > 0;
  RenderOutput out;
  if (need_render) {
    auto t0 = clock::now();
    out = render(field_, camera_for(iteration), render_settings_for(iteration));
    rep.ms_render = elapsed_ms(t0);
    rep.mean_coverage = pairwise_sum(out.coverage) / static_cast<double>(out.coverage.size());
  }

  if (tc.lambda_sds > 0) {
    auto t0 = clock::now();
    const GuidanceResponse resp = provider_->request(make_guidance_request(out, static_cast<std::uint32_t>(iteration)));
    rep.ms_guidance = elapsed_ms(t0);
    rep.loss_sds = resp.diagnostic_loss;
    t0 = clock::now();
    sg.sds = apply_sds_gradient(field_, resp, out, 1.0);
    rep.ms_backprop += elapsed_ms(t0);
  }

  if (tc.lambda_point > 0 && iteration % tc.pc_every == 0) {
    auto t0 = clock::now();
    Rng qrng(mix(tc.seed, static_cast<std::uint64_t>(iteration), kQuery));
    const auto queries = sample_query_points(qrng, field_.bounds(), static_cast<std::size_t>(tc.batch_size));
    const PointLossReport pr = point_loss_gradient(field_, *guide_, queries, cfg_.geomloss, sg.pc);
    rep.loss_pc = pr.loss;
    rep.soft = pr.soft;
    rep.zero = pr.zero;
    rep.ignore = pr.ignore;
    rep.ms_point = elapsed_ms(t0);
  }

  if (tc.lambda_sparse > 0) {
    auto t0 = clock::now();
    const SparsityLoss sp = sparsity_loss(out);
    rep.loss_sparse = sp.loss;
    sg.sparse = backprop_pixel_gradients(field_, out, {}, {}, sp.dloss_dweight);
    rep.ms_backprop += elapsed_ms(t0);
  }

  if (tc.lambda_point > 0) {
    sg.total.axpy(tc.lambda_point, sg.pc);
  }
  if (tc.lambda_sds > 0) {
    sg.total.axpy(tc.lambda_sds, sg.sds);
  }
  if (tc.lambda_sparse > 0) {
    sg.total.axpy(tc.lambda_sparse, sg.sparse);
  }
  rep.loss_total = tc.lambda_point * rep.loss_pc + tc.lambda_sds * rep.loss_sds + tc.lambda_sparse * rep.loss_sparse;
  rep.grad_norm_pc = sg.pc.norm();
  rep.grad_norm_sds = sg.sds.norm();
  rep.grad_norm_sparse = sg.sparse.norm();
  rep.grad_norm_total = sg.total.norm();
  rep.ms_total = elapsed_ms(t_start);

  if (!sg.total.all_finite()) {
    std::ostringstream msg;
    msg << "non-finite gradient at iteration " << iteration << " (finite: pc=" << sg.pc.all_finite()
        << " sds=" << sg.sds.all_finite() << " sparse=" << sg.sparse.all_finite() << "; losses pc=" << rep.loss_pc
        << " sds=" << rep.loss_sds << " sparse=" << rep.loss_sparse << ")";
    throw Error("trainer", "nan", msg.str());
  }
  return sg;
}

StepReport Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  StepGradients sg = compute_gradients(iteration_);
  if (cfg_.trainer.loss_scale != 1.0) {
    sg.total.scale(cfg_.trainer.loss_scale);
  }
  adam_.step(field_, sg.total, cfg_.trainer);
  ++iteration_;
  sg.report.ms_total = elapsed_ms(t0);
  return sg.report;
}

std::string step_report_json(const StepReport &r, bool with_timing) {
  json j{{"iteration", r.iteration},
         {"loss_total", r.loss_total},
         {"loss_pc", r.loss_pc},
         {"loss_sds", r.loss_sds},
         {"loss_sparse", r.loss_sparse},
         {"grad_norm_total", r.grad_norm_total},
         {"grad_norm_pc", r.grad_norm_pc},
         {"grad_norm_sds", r.grad_norm_sds},
         {"grad_norm_sparse", r.grad_norm_sparse},
         {"soft", r.soft},
         {"zero", r.zero},
         {"ignore", r.ignore},
         {"mean_coverage", r.mean_coverage}};
  if (with_timing) {
    j["timing_ms"] = {{"render", r.ms_render},
                      {"guidance", r.ms_guidance},
                      {"point", r.ms_point},
                      {"backprop", r.ms_backprop},
                      {"total", r.ms_total}};
  }
  return j.dump();
}

PointCloud prepare_guide(const RunConfig &cfg) {
  if (cfg.guide_ply.empty()) {
    throw Error("trainer", "config", "guide_ply is not set");
  }
  PointCloud pc = load_point_cloud(cfg.guide_ply);
  if (cfg.guide.normalize) {
    pc = normalize_to_bounds(pc, cfg.field.bounds, cfg.guide.margin).first;
  }
  if (cfg.guide.upsample_n > 0) {
    pc = upsample(pc, cfg.guide.upsample_q, cfg.guide.upsample_n, cfg.guide.dedup_epsilon);
  }
  return pc;
}

VoxelField make_initial_field(const RunConfig &cfg) {
  VoxelField probe(cfg.field.resolution, cfg.field.bounds);
  const double scale = cfg.field.density_scale > 0 ? cfg.field.density_scale : 1.0 / probe.voxel_edge();
  return init_field(cfg.field.resolution, cfg.field.bounds, cfg.field.init, scale);
}

FitResult fit(const RunConfig &cfg, const std::function<void(const StepReport &)> &on_step) {
  cfg.validate();
  if (cfg.threads > 0) {
    set_thread_count(static_cast<unsigned>(cfg.threads));
  }
  const TrainConfig &tc = cfg.trainer;

  std::shared_ptr<const NearestNeighborIndex> guide;
  std::size_t guide_points = 0;
  if (!cfg.guide_ply.empty()) {
    const PointCloud pc = prepare_guide(cfg);
    guide_points = pc.size();
    guide = std::make_shared<const NearestNeighborIndex>(pc);
  } else if (tc.lambda_point > 0) {
    throw Error("trainer", "config", "lambda_point > 0 needs guide_ply");
  }

  std::unique_ptr<GuidanceProvider> provider;
  if (tc.lambda_sds > 0) {
    if (!cfg.bridge_address.empty()) {
      provider = std::make_unique<RemoteGuidance>(open_transport(cfg.bridge_address));
    } else if (!cfg.target_latent.empty()) {
      provider = std::make_unique<MockGuidance>(read_latent(cfg.target_latent));
    } else {
      throw Error("trainer", "config", "lambda_sds > 0 needs target_latent or bridge_address");
    }
    wire::Hello hello;
    hello.width = cfg.camera.width;
    hello.height = cfg.camera.height;
    hello.channels = kLatentChannels;
    hello.prompt = cfg.prompt;
    hello.seed = tc.seed;
    provider->open(hello);
  }

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream cj(fs::path(cfg.out_dir) / "config.json");
    cj << run_config_to_json(cfg) << "\n";
    json run{{"threads", thread_count()}, {"guide_points", guide_points}};
    std::ofstream rj(fs::path(cfg.out_dir) / "run.json");
    rj << run.dump(2) << "\n";
  }
  const fs::path metrics_path = fs::path(cfg.out_dir) / "metrics.jsonl";
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) {
    throw Error("trainer", "io", metrics_path.string() + ": cannot open for writing");
  }

  Trainer trainer(make_initial_field(cfg), guide, provider.get(), cfg);
  FitResult result{trainer.field(), {}, guide_points};
  for (int it = 0; it < tc.iterations; ++it) {
    const StepReport r = trainer.step();
    metrics << step_report_json(r) << "\n";
    metrics.flush();
    result.reports.push_back(r);
    if (on_step) {
      on_step(r);
    }
    if (it % 100 == 0) {
      auto finite = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
      };
      if (!finite(trainer.field().raw_density()) || !finite(trainer.field().latent())) {
        throw Error("trainer", "nan", "non-finite parameter after iteration " + std::to_string(it));
      }
    }
    if (tc.checkpoint_every > 0 && (it + 1) % tc.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06d.p23d", it + 1);
      save_checkpoint(trainer.field(), (fs::path(cfg.out_dir) / name).string());
    }
  }
  if (provider) {
    provider->close();
  }
  save_checkpoint(trainer.field(), (fs::path(cfg.out_dir) / "final.p23d").string());
  result.field = trainer.field();
  return result;
}

} // namespace p23d
