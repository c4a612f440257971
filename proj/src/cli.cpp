#include "p23d/cli.hpp"

#include "p23d/field.hpp"
#include "p23d/gradcheck.hpp"
#include "p23d/meshout.hpp"
#include "p23d/ply.hpp"
#include "p23d/pointcloud.hpp"
#include "p23d/render.hpp"
#include "p23d/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace p23d {

namespace {

using nlohmann::json;

struct GlobalOptions {
  std::optional<int> threads;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

struct UpsampleOptions {
  std::string input, output;
  int q = 20, n = 2;
  double epsilon = -1.0;
};

struct FitOptions {
  std::string config;
  std::vector<std::string> overrides;
  std::string out_dir;
};

struct RenderOptions {
  std::string checkpoint;
  std::string pose;
  int orbit = 0;
  double radius = 1.4, elevation = 20.0, fov = 50.0;
  int width = 64, height = 64, samples = 96;
  double near = 0.1, far = 4.2;
  bool jitter = false;
  std::string out_dir = ".";
};

struct MeshOptions {
  std::string checkpoint;
  std::optional<double> iso, iso_alpha;
  std::string out;
  bool normals = false;
};

struct EvalOptions {
  std::string mesh, reference;
  double tau = 0.02;
  std::size_t samples = kMeshScoreSamples;
};

std::array<double, 16> parse_pose(const std::string &text) {
  std::string s = text;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::istringstream in(s);
  std::array<double, 16> pose{};
  for (double &v : pose) {
    if (!(in >> v)) {
      throw Error("cli", "usage", "--pose needs 16 numbers (row-major camera-to-world)");
    }
  }
  std::string rest;
  if (in >> rest) {
    throw Error("cli", "usage", "--pose needs exactly 16 numbers");
  }
  return pose;
}

std::vector<float> to_float(std::span<const double> v) { return {v.begin(), v.end()}; }

// Loads a mesh, or a point cloud when the file has no faces.
std::vector<Vec3> load_scoring_points(const std::string &path, std::size_t samples, std::uint64_t seed) {
  bool has_faces = mesh_format_for(path) == MeshFormat::Obj;
  if (!has_faces) {
    const ply::File f = ply::read(path);
    const ply::Element *faces = f.find("face");
    has_faces = faces != nullptr && faces->count > 0;
  }
  if (has_faces) {
    return sample_surface(load_mesh(path), samples, seed);
  }
  return load_point_cloud(path).points;
}

int cmd_upsample(const UpsampleOptions &o, std::ostream &out) {
  const PointCloud in = load_point_cloud(o.input);
  const PointCloud up = upsample(in, o.q, o.n, o.epsilon);
  save_point_cloud(up, o.output);
  out << json{{"input_points", in.size()}, {"output_points", up.size()}, {"output", o.output}}.dump() << '\n';
  return kExitOk;
}

int cmd_fit(const FitOptions &o, const GlobalOptions &g, std::ostream &out, std::ostream &err) {
  std::vector<std::string> overrides = o.overrides;
  if (g.threads) {
    overrides.push_back("threads=" + std::to_string(*g.threads));
  }
  if (g.seed) {
    overrides.push_back("trainer.seed=" + std::to_string(*g.seed));
  }
  RunConfig cfg = load_run_config(o.config, overrides);
  if (!o.out_dir.empty()) {
    cfg.out_dir = o.out_dir;
  }
  const int every = std::max(1, cfg.trainer.iterations / 20);
  const FitResult res = fit(cfg, [&](const StepReport &r) {
    if (g.verbose && (r.iteration % every == 0 || r.iteration + 1 == cfg.trainer.iterations)) {
      err << step_report_json(r) << '\n';
    }
  });
  json summary{{"iterations", res.reports.size()},
               {"guide_points", res.guide_points},
               {"out_dir", cfg.out_dir},
               {"checkpoint", (std::filesystem::path(cfg.out_dir) / "final.p23d").string()}};
  if (!res.reports.empty()) {
    summary["loss_total"] = res.reports.back().loss_total;
  }
  out << summary.dump() << '\n';
  return kExitOk;
}

int cmd_render(const RenderOptions &o, const GlobalOptions &g, std::ostream &out) {
  const VoxelField field = load_checkpoint(o.checkpoint);
  std::vector<Camera> cams;
  if (!o.pose.empty()) {
    Camera c;
    c.pose = parse_pose(o.pose);
    c.fov_deg = o.fov;
    c.width = o.width;
    c.height = o.height;
    c.validate();
    cams.push_back(c);
  }
  for (int i = 0; i < o.orbit; ++i) {
    cams.push_back(orbit_camera(o.radius, o.elevation, 360.0 * i / o.orbit, o.fov, o.width, o.height));
  }
  RenderSettings rs;
  rs.samples_per_ray = o.samples;
  rs.near = o.near;
  rs.far = o.far;
  rs.jitter = o.jitter;
  rs.seed = g.seed.value_or(0);
  std::filesystem::create_directories(o.out_dir);
  for (std::size_t i = 0; i < cams.size(); ++i) {
    const RenderOutput r = render(field, cams[i], rs);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "view_%03zu", i);
    const auto base = (std::filesystem::path(o.out_dir) / stem).string();
    std::vector<double> rgb(r.rays() * 3);
    for (std::size_t p = 0; p < r.rays(); ++p) {
      for (int c = 0; c < 3; ++c) {
        rgb[p * 3 + c] = r.latent[p * kLatentChannels + c];
      }
    }
    write_pfm(base + "_latent.pfm", r.width, r.height, 3, to_float(rgb));
    write_pfm(base + "_depth.pfm", r.width, r.height, 1, to_float(r.depth));
    write_pfm(base + "_coverage.pfm", r.width, r.height, 1, to_float(r.coverage));
    write_png(base + "_latent.png", r.width, r.height, 3, rgb);
    write_png(base + "_depth.png", r.width, r.height, 1, normalized_depth(r));
    out << json{{"view", i}, {"prefix", base}, {"pose", std::vector<double>(r.camera.pose.begin(), r.camera.pose.end())}}
               .dump()
        << '\n';
  }
  return kExitOk;
}

int cmd_mesh(const MeshOptions &o, std::ostream &out) {
  const VoxelField field = load_checkpoint(o.checkpoint);
  double iso = default_iso(field);
  if (o.iso) {
    iso = *o.iso;
  } else if (o.iso_alpha) {
    if (!(*o.iso_alpha > 0.0 && *o.iso_alpha < 1.0)) {
      throw Error("cli", "usage", "--iso-alpha must be in (0, 1)");
    }
    iso = iso_from_alpha(*o.iso_alpha, field.voxel_edge());
  }
  TriangleMesh mesh = marching_cubes(field, iso);
  if (o.normals) {
    compute_normals(mesh);
  }
  export_mesh(mesh, o.out);
  const MeshTopology t = mesh_topology(mesh);
  out << json{{"iso", iso},
              {"vertices", mesh.vertices.size()},
              {"triangles", mesh.triangles.size()},
              {"boundary_edges", t.boundary_edges},
              {"euler", t.euler()},
              {"out", o.out}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_gradcheck(const GlobalOptions &g, std::ostream &out) {
  bool ok = true;
  for (const GradCheckResult &r : run_gradient_suites(g.seed.value_or(0))) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-18s entries=%-6zu max_rel_error=%.3e tolerance=%.0e %s", r.name.c_str(),
                  r.checked, r.max_rel_error, r.tolerance, r.passed() ? "PASS" : "FAIL");
    out << line << '\n';
    ok = ok && r.passed();
  }
  return ok ? kExitOk : kExitRuntime;
}

int cmd_eval(const EvalOptions &o, const GlobalOptions &g, std::ostream &out) {
  const std::uint64_t seed = g.seed.value_or(0);
  const std::vector<Vec3> a = load_scoring_points(o.mesh, o.samples, seed);
  const std::vector<Vec3> b = load_scoring_points(o.reference, o.samples, seed + 1);
  const GeometryScore s = chamfer_and_fscore(a, b, o.tau);
  out << json{{"chamfer", s.chamfer}, {"precision", s.precision}, {"recall", s.recall}, {"fscore", s.fscore},
              {"tau", o.tau}, {"points", a.size()}, {"reference_points", b.size()}}
             .dump()
      << '\n';
  return kExitOk;
}

void print_error(std::ostream &err, const std::string &module, const std::string &kind, const std::string &msg) {
  err << "error:" << module << ':' << kind << ": " << msg << '\n';
}

} // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Point-cloud guided voxel radiance fields: fitting, rendering and meshing.", "p23d"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  GlobalOptions g;
  app.add_option("--threads", g.threads, "Worker threads (0 = hardware default; P23D_THREADS when absent)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--seed", g.seed, "Seed for randomized steps");
  app.add_flag("-v,--verbose", g.verbose, "Progress on standard error");

  UpsampleOptions up;
  auto *sub_up = app.add_subcommand("upsample", "Densify a point cloud with nearest-neighbour midpoints");
  sub_up->add_option("input", up.input, "Input PLY")->required();
  sub_up->add_option("output", up.output, "Output PLY")->required();
  sub_up->add_option("--q", up.q, "Neighbours per point")->capture_default_str()->check(CLI::PositiveNumber);
  sub_up->add_option("--n", up.n, "Rounds")->capture_default_str()->check(CLI::NonNegativeNumber);
  sub_up->add_option("--epsilon", up.epsilon, "Dedup tolerance (< 0 = relative default)")->capture_default_str();

  FitOptions fo;
  auto *sub_fit = app.add_subcommand("fit", "Optimize a field from a JSON config");
  sub_fit->add_option("config", fo.config, "Config JSON")->required();
  sub_fit->add_option("--set", fo.overrides, "Override a config key (dotted.key=value); repeatable");
  sub_fit->add_option("--out-dir", fo.out_dir, "Output directory (overrides out_dir)");

  RenderOptions ro;
  auto *sub_render = app.add_subcommand("render", "Render a checkpoint to PFM and PNG images");
  sub_render->add_option("checkpoint", ro.checkpoint, "Field checkpoint")->required();
  auto *pose = sub_render->add_option("--pose", ro.pose, "Row-major camera-to-world matrix, 16 numbers");
  auto *orbit =
      sub_render->add_option("--orbit", ro.orbit, "Number of views on an orbit")->check(CLI::PositiveNumber);
  sub_render->add_option("--radius", ro.radius, "Orbit radius")->capture_default_str();
  sub_render->add_option("--elevation", ro.elevation, "Orbit elevation in degrees")->capture_default_str();
  sub_render->add_option("--fov", ro.fov, "Vertical field of view in degrees")->capture_default_str();
  sub_render->add_option("--width", ro.width, "Image width")->capture_default_str()->check(CLI::PositiveNumber);
  sub_render->add_option("--height", ro.height, "Image height")->capture_default_str()->check(CLI::PositiveNumber);
  sub_render->add_option("--samples", ro.samples, "Samples per ray")->capture_default_str()->check(CLI::PositiveNumber);
  sub_render->add_option("--near", ro.near, "Near bound")->capture_default_str();
  sub_render->add_option("--far", ro.far, "Far bound")->capture_default_str();
  sub_render->add_flag("--jitter", ro.jitter, "Stratified jitter (seeded by --seed)");
  sub_render->add_option("--out", ro.out_dir, "Output directory")->capture_default_str();
  pose->excludes(orbit);

  MeshOptions mo;
  auto *sub_mesh = app.add_subcommand("mesh", "Extract an isosurface mesh (OBJ or PLY)");
  sub_mesh->add_option("checkpoint", mo.checkpoint, "Field checkpoint")->required();
  auto *iso = sub_mesh->add_option("--iso", mo.iso, "Density threshold (default ln 2 / voxel edge)");
  auto *iso_alpha = sub_mesh->add_option("--iso-alpha", mo.iso_alpha, "Threshold as point opacity over one voxel");
  sub_mesh->add_option("--out", mo.out, "Output mesh (.obj or .ply)")->required();
  sub_mesh->add_flag("--normals", mo.normals, "Write vertex normals");
  iso->excludes(iso_alpha);

  app.add_subcommand("gradcheck", "Run the finite-difference gradient suites");

  EvalOptions eo;
  auto *sub_eval = app.add_subcommand("eval", "Chamfer distance and F-score against a reference");
  sub_eval->add_option("mesh", eo.mesh, "Mesh or point cloud (.obj or .ply)")->required();
  sub_eval->add_option("reference", eo.reference, "Reference mesh or point cloud")->required();
  sub_eval->add_option("--tau", eo.tau, "F-score distance threshold")->capture_default_str()->check(CLI::PositiveNumber);
  sub_eval->add_option("--samples", eo.samples, "Surface samples per mesh")->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError &e) {
    print_error(err, "cli", "usage", e.what());
    return kExitUsage;
  }

  try {
    if (g.threads) {
      set_thread_count(static_cast<unsigned>(*g.threads));
    }
    if (sub_render->parsed() && ro.pose.empty() && ro.orbit == 0) {
      throw Error("cli", "usage", "render needs --pose or --orbit");
    }
    if (sub_up->parsed()) {
      return cmd_upsample(up, out);
    }
    if (sub_fit->parsed()) {
      return cmd_fit(fo, g, out, err);
    }
    if (sub_render->parsed()) {
      return cmd_render(ro, g, out);
    }
    if (sub_mesh->parsed()) {
      return cmd_mesh(mo, out);
    }
    if (sub_eval->parsed()) {
      return cmd_eval(eo, g, out);
    }
    return cmd_gradcheck(g, out);
  } catch (const Error &e) {
    print_error(err, e.module(), e.kind(), e.what());
    return e.kind() == "usage" || e.kind() == "config" ? kExitUsage : kExitRuntime;
  } catch (const std::exception &e) {
    print_error(err, "cli", "runtime", e.what());
    return kExitRuntime;
  }
}

int cli_main(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

} // namespace p23d
