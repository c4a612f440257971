// Acceptance report: one PASS/FAIL line per criterion, then a summary.
// The exit status is nonzero only when the harness itself breaks (missing
// fixture, unexpected exception); criterion failures are reported, not hidden.

#include "p23d/cli.hpp"
#include "p23d/geomloss.hpp"
#include "p23d/gradcheck.hpp"
#include "p23d/meshout.hpp"
#include "p23d/pointcloud.hpp"
#include "p23d/render.hpp"
#include "p23d/spatial.hpp"
#include "p23d/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace p23d;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

int g_passed = 0, g_total = 0;
std::ofstream g_report;

// Result lines go to stdout and to the report file next to the build tree.
void emit(const std::string &line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  g_report << line << '\n' << std::flush;
}

void report(const std::string &name, const Verdict &v) {
  ++g_total;
  g_passed += v.pass ? 1 : 0;
  emit(std::string(v.pass ? "PASS " : "FAIL ") + name + ": " + v.detail);
}

std::string fmt(const char *f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

const std::string kFixtures = P23D_FIXTURES;
const std::string kScratch = std::string(P23D_SCRATCH) + "/acceptance";

// Plain scan in index order; strict < keeps the lowest index on ties.
Neighbor scan_nearest(const std::vector<Vec3> &pts, const Vec3 &q) {
  Neighbor best;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = q.x - pts[i].x, dy = q.y - pts[i].y, dz = q.z - pts[i].z;
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best.dist_sq) {
      best = {d, static_cast<std::uint32_t>(i)};
    }
  }
  return best;
}

Verdict nn_oracle() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  std::size_t mismatches = 0, queries_total = 0;
  for (int inst = 0; inst < 200; ++inst) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 2000.0) % 2000;
    const std::size_t m = 1 + static_cast<std::size_t>(rng.uniform() * 2000.0) % 2000;
    // every fourth instance snaps to a coarse lattice so exact ties occur
    const bool lattice = inst % 4 == 0;
    auto draw = [&] {
      Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      if (lattice) {
        for (int a = 0; a < 3; ++a) {
          p[a] = std::round(p[a] * 4.0) / 4.0;
        }
      }
      return p;
    };
    std::vector<Vec3> pts(n), qs(m);
    for (auto &p : pts) {
      p = draw();
    }
    for (auto &q : qs) {
      q = draw();
      if (lattice) {
        q = q + Vec3{0.125, 0.125, 0.0};
      }
    }
    const NearestNeighborIndex idx(pts);
    const DistanceBatch d = nearest_distance_batch(idx, qs);
    for (std::size_t i = 0; i < m; ++i) {
      const Neighbor b = scan_nearest(pts, qs[i]);
      const Neighbor k = idx.nearest(qs[i]);
      if (k.index != b.index || k.dist_sq != b.dist_sq || d.distances[i] != std::sqrt(b.dist_sq)) {
        ++mismatches;
      }
    }
    queries_total += m;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 30.0, std::to_string(mismatches) + " mismatches over " +
                                              std::to_string(queries_total) + " queries in 200 instances, " +
                                              fmt("%.2f s (budget 30 s)", secs)};
}

Verdict gradient_suites() {
  const auto t0 = Clock::now();
  std::ostringstream d;
  bool ok = true;
  for (const GradCheckResult &r : run_gradient_suites(0)) {
    d << r.name << "=" << fmt("%.2e", r.max_rel_error) << "/" << fmt("%.0e", r.tolerance) << " ";
    ok = ok && r.passed();
  }
  const double secs = seconds_since(t0);
  d << fmt("in %.2f s (budget 120 s)", secs);
  return {ok && secs < 120.0, d.str()};
}

Verdict occupancy_semantics() {
  const GeomLossConfig cfg; // tau1 = 0.95, tau2 = 0.9
  std::vector<double> dhat;
  for (int i = 0; i <= 30; ++i) {
    dhat.push_back(0.005 * i);
  }
  const OccupancyTarget t = target_occupancy(DistanceBatch{dhat}, cfg);
  std::size_t wrong = 0, soft = 0, zero = 0, ignore = 0;
  for (std::size_t i = 0; i < dhat.size(); ++i) {
    const double p = 1.0 - dhat[i];
    OccupancyLabel expect = OccupancyLabel::Ignore;
    if (p > 0.95) {
      expect = OccupancyLabel::Soft;
    } else if (p < 0.9) {
      expect = OccupancyLabel::Zero;
    }
    soft += expect == OccupancyLabel::Soft;
    zero += expect == OccupancyLabel::Zero;
    ignore += expect == OccupancyLabel::Ignore;
    if (t.labels[i] != expect || (expect == OccupancyLabel::Soft && t.values[i] != p) ||
        (expect != OccupancyLabel::Soft && t.values[i] != 0.0)) {
      ++wrong;
    }
  }
  const bool counts = t.soft_count == soft && t.zero_count == zero && t.ignore_count == ignore &&
                      soft + zero + ignore == dhat.size();

  // perturbing the density at Ignore points leaves the loss bit-identical
  Rng rng(5);
  std::vector<double> sigma(dhat.size());
  for (double &s : sigma) {
    s = rng.uniform(0.0, 100.0);
  }
  const double delta = 2.0 / 95.0;
  auto loss = [&] {
    std::vector<double> a(sigma.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = point_alpha(sigma[i], delta).alpha;
    }
    return point_cloud_loss(a, t, cfg);
  };
  const PointLoss base = loss();
  double max_change = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::vector<double> saved = sigma;
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      if (t.labels[i] == OccupancyLabel::Ignore) {
        sigma[i] = rng.uniform(0.0, 1000.0);
      }
    }
    const PointLoss l = loss();
    max_change = std::max(max_change, std::abs(l.loss - base.loss));
    for (std::size_t i = 0; i < sigma.size(); ++i) {
      if (t.labels[i] == OccupancyLabel::Ignore && l.dloss_dalpha[i] != 0.0) {
        max_change = std::max(max_change, std::abs(l.dloss_dalpha[i]));
      }
    }
    sigma = saved;
  }
  return {wrong == 0 && counts && max_change == 0.0,
          "soft=" + std::to_string(t.soft_count) + " zero=" + std::to_string(t.zero_count) +
              " ignore=" + std::to_string(t.ignore_count) + ", " + std::to_string(wrong) +
              " mislabeled, max loss change under ignore perturbation " + fmt("%.3g", max_change)};
}

Verdict upsampling_scale() {
  const PointCloud guide = load_point_cloud(kFixtures + "/sphere_guide.ply");
  const auto t0 = Clock::now();
  const PointCloud up = upsample(guide, 20, 2);
  const double secs = seconds_since(t0);
  bool superset = up.size() >= guide.size();
  for (std::size_t i = 0; superset && i < guide.size(); ++i) {
    superset = up.points[i] == guide.points[i];
  }
  const double bound = static_cast<double>(guide.size()) * 21.0 * 21.0;
  const bool in_range = up.size() >= 80000 && up.size() <= 1800000;
  return {guide.size() == 4096 && superset && static_cast<double>(up.size()) <= bound && in_range,
          std::to_string(guide.size()) + " -> " + std::to_string(up.size()) + " points (range [8e4, 1.8e6], bound " +
              fmt("%.0f", bound) + "), superset " + (superset ? "holds" : "violated") + fmt(", %.1f s", secs)};
}

std::vector<Vec3> analytic_sphere(std::size_t n, double radius) {
  Rng rng(777);
  std::vector<Vec3> v(n);
  for (auto &p : v) {
    p = normalize(Vec3{rng.normal(), rng.normal(), rng.normal()}) * radius;
  }
  return v;
}

struct SphereFit {
  VoxelField field;
  RunConfig cfg;
  double seconds = 0.0;
};

SphereFit fit_sphere() {
  RunConfig cfg = load_run_config(kFixtures + "/sphere.json", {"out_dir=" + kScratch + "/sphere"});
  const auto t0 = Clock::now();
  FitResult r = fit(cfg, [](const StepReport &s) {
    if ((s.iteration + 1) % 250 == 0) {
      std::printf("  sphere fit: step %d loss_pc %.5f loss_sparse %.4f\n", s.iteration + 1, s.loss_pc, s.loss_sparse);
      std::fflush(stdout);
    }
  });
  return {std::move(r.field), cfg, seconds_since(t0)};
}

// The mesh is taken where the occupancy target equals 1 - (one voxel edge
// normalized by the half extent), i.e. one edge from the guide surface.
double sphere_iso(const VoxelField &f) {
  const Vec3 e = f.bounds().extent();
  const double half = 0.5 * std::max({e.x, e.y, e.z});
  return iso_from_alpha(1.0 - f.voxel_edge() / half, f.voxel_edge());
}

Verdict sphere_convergence(const SphereFit &s) {
  const VoxelField &f = s.field;
  const double edge = f.voxel_edge();
  const double iso = sphere_iso(f);
  const TriangleMesh mesh = marching_cubes(f, iso);
  if (mesh.empty()) {
    const auto raw = f.raw_density();
    const double peak = *std::max_element(raw.begin(), raw.end());
    const double sigma = f.density_scale() * (peak > 30.0 ? peak : std::log1p(std::exp(peak)));
    return {false, "empty mesh at the scoring iso " + fmt("%.1f", iso) + ": largest vertex density " +
                       fmt("%.1f", sigma) + fmt(" after %.0f s of fitting", s.seconds)};
  }
  const MeshTopology topo = mesh_topology(mesh);
  const auto samples = sample_surface(mesh, kMeshScoreSamples, 1);
  const auto ref = analytic_sphere(kMeshScoreSamples, 0.6);
  const GeometryScore g = chamfer_and_fscore(samples, ref, 2.0 * edge);
  const unsigned cores = std::thread::hardware_concurrency();
  const bool quality = g.fscore >= 0.95 && g.chamfer <= 1.5 * edge;
  // The time budget is stated for 8 desktop cores; smaller hosts report the
  // measured time without judging it.
  const bool timed = cores >= 8;
  const bool on_time = !timed || s.seconds < 600.0;
  std::string d = "F=" + fmt("%.4f", g.fscore) + " (>= 0.95) chamfer=" + fmt("%.3f", g.chamfer / edge) +
                  " edges (<= 1.5), P=" + fmt("%.4f", g.precision) + " R=" + fmt("%.4f", g.recall) +
                  ", mesh " + std::to_string(topo.vertices) + " vertices, " + std::to_string(topo.boundary_edges) +
                  " boundary edges, fit " + fmt("%.0f s", s.seconds) + " on " + std::to_string(cores) + " core(s)";
  d += timed ? " (budget 600 s)" : " (600 s budget applies to 8 cores; not judged here)";
  return {quality && on_time, d};
}

Verdict depth_correctness(const SphereFit &s) {
  RenderSettings rs;
  rs.samples_per_ray = s.cfg.samples_per_ray;
  rs.near = s.cfg.camera.near;
  rs.far = s.cfg.camera.far;
  rs.jitter = false;
  const double tol = (rs.far - rs.near) / rs.samples_per_ray;
  std::ostringstream d;
  bool ok = true;
  for (double az : {0.0, 120.0, 240.0}) {
    const Camera cam = orbit_camera(1.4, 20.0, az, 50.0, 33, 33);
    const RenderOutput out = render(s.field, cam, rs);
    const std::size_t c = 16 * 33 + 16;
    const double err = std::abs(out.depth[c] - 0.8);
    ok = ok && err <= tol;
    d << "az " << static_cast<int>(az) << ": depth " << fmt("%.4f", out.depth[c]) << " coverage "
      << fmt("%.3f", out.coverage[c]) << "; ";
  }
  d << "target 0.8 +- " << fmt("%.4f", tol);
  return {ok, d.str()};
}

// Guidance that renders a painted copy of the field with the trainer's
// camera and sample positions for the requested iteration and answers with
// the photometric residual against it.
class PaintedTarget final : public GuidanceProvider {
public:
  explicit PaintedTarget(VoxelField painted) : painted_(std::move(painted)) {}

  void attach(const Trainer *trainer) { trainer_ = trainer; }

  GuidanceResponse request(const GuidanceRequest &req) override {
    const int it = static_cast<int>(req.iteration);
    const RenderOutput out = render(painted_, trainer_->camera_for(it), trainer_->render_settings_for(it));
    const std::vector<float> target(out.latent.begin(), out.latent.end());
    return mock_photometric_guidance(req, target);
  }
  std::string name() const override { return "painted"; }

private:
  VoxelField painted_;
  const Trainer *trainer_ = nullptr;
};

void paint(VoxelField &f) {
  auto lat = f.latent_mut();
  const Resolution &r = f.resolution();
  for (int k = 0; k < r[2]; ++k) {
    for (int j = 0; j < r[1]; ++j) {
      for (int i = 0; i < r[0]; ++i) {
        const Vec3 p = f.vertex_position(i, j, k);
        const std::size_t v = f.vertex_index(i, j, k);
        lat[v * 4 + 0] = 0.5 * std::sin(3.0 * p.x);
        lat[v * 4 + 1] = 0.5 * std::cos(2.0 * p.y + 0.5);
        lat[v * 4 + 2] = 0.4 * p.z;
        lat[v * 4 + 3] = 0.5 * p.x * p.y;
      }
    }
  }
  f.background_mut() = {0.2, -0.1, 0.3, 0.0};
}

double held_out_residual(const VoxelField &learned, const VoxelField &painted, const RenderSettings &rs) {
  double sum = 0.0;
  std::size_t count = 0;
  for (int v = 0; v < 8; ++v) {
    const Camera cam = orbit_camera(1.4, 15.0 + 5.0 * (v % 3), 22.5 + 45.0 * v, 50.0, 64, 64);
    const RenderOutput a = render(learned, cam, rs);
    const RenderOutput b = render(painted, cam, rs);
    for (std::size_t i = 0; i < a.latent.size(); ++i) {
      const double d = a.latent[i] - b.latent[i];
      sum += d * d;
    }
    count += a.latent.size();
  }
  return sum / static_cast<double>(count);
}

Verdict mock_sds(const SphereFit &s) {
  VoxelField painted = s.field;
  paint(painted);
  VoxelField start = s.field;
  for (double &l : start.latent_mut()) {
    l = 0.0;
  }
  start.background_mut() = {};

  RunConfig cfg = s.cfg;
  cfg.trainer.lambda_sds = 1.0;
  cfg.trainer.lambda_point = 0.0;
  cfg.trainer.lambda_sparse = 0.0;
  cfg.trainer.density_lr_scale = 0.0;
  cfg.trainer.lr = 1e-2;
  cfg.trainer.loss_scale = 1.0;
  cfg.trainer.seed = 99;
  cfg.camera.fov_jitter_min = cfg.camera.fov_jitter_max = 0.0;

  RenderSettings rs;
  rs.samples_per_ray = cfg.samples_per_ray;
  rs.near = cfg.camera.near;
  rs.far = cfg.camera.far;
  rs.jitter = false;

  PaintedTarget provider(painted);
  const double before = held_out_residual(start, painted, rs);
  const auto t0 = Clock::now();
  Trainer tr(start, nullptr, &provider, cfg);
  provider.attach(&tr);
  for (int i = 0; i < 500; ++i) {
    tr.step();
  }
  const double secs = seconds_since(t0);
  const double after = held_out_residual(tr.field(), painted, rs);
  const double drop = before > 0.0 ? 1.0 - after / before : 0.0;
  return {drop >= 0.9 && secs < 300.0, "held-out latent MSE " + fmt("%.5f", before) + " -> " + fmt("%.5f", after) +
                                         " (drop " + fmt("%.1f%%", 100.0 * drop) + ", need >= 90%), 500 steps in " +
                                         fmt("%.0f s (budget 300 s)", secs)};
}

std::string file_bytes(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict reproducibility() {
  std::vector<std::string> ckpts;
  for (const char *run : {"repro_a", "repro_b"}) {
    const std::string dir = kScratch + "/" + run;
    std::ostringstream out, err;
    const int code = run_cli({"--threads", "2", "--seed", "17", "fit", kFixtures + "/sphere.json", "--out-dir", dir,
                              "--set", "trainer.iterations=25"},
                             out, err);
    if (code != 0) {
      return {false, "fit exited with " + std::to_string(code) + ": " + err.str()};
    }
    ckpts.push_back(file_bytes(dir + "/final.p23d"));
  }
  const bool same = !ckpts[0].empty() && ckpts[0] == ckpts[1];
  return {same, "two 25-step fits (seed 17, 2 threads): checkpoints of " + std::to_string(ckpts[0].size()) +
                    " bytes " + (same ? "bitwise identical" : "differ")};
}

} // namespace

int main() {
  g_report.open(P23D_REPORT);
  try {
    fs::create_directories(kScratch);
    report("NN oracle", nn_oracle());
    report("Gradient suites", gradient_suites());
    report("Occupancy-target semantics", occupancy_semantics());
    report("Upsampling scale", upsampling_scale());
    const SphereFit sphere = fit_sphere();
    report("Sphere-fitting convergence", sphere_convergence(sphere));
    report("Mock-SDS end-to-end", mock_sds(sphere));
    report("Depth correctness", depth_correctness(sphere));
    report("Reproducibility", reproducibility());
  } catch (const std::exception &e) {
    emit(std::string("ERROR acceptance harness: ") + e.what());
    return 2;
  }
  emit(std::to_string(g_passed) + "/" + std::to_string(g_total) + " criteria passed");
  return 0;
}
