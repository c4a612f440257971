#include "helpers.hpp"

#include "p23d/cli.hpp"
#include "p23d/field.hpp"
#include "p23d/meshout.hpp"
#include "p23d/pointcloud.hpp"

#include <doctest.h>
#include <json.hpp>

#include <fstream>
#include <sstream>

using namespace p23d;
using namespace p23d::test;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(const std::vector<std::string> &args) {
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string golden(const std::string &name) {
  std::ifstream in(std::string(P23D_GOLDEN) + "/" + name);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), {}};
}

nlohmann::json last_json(const std::string &out) {
  std::istringstream in(out);
  std::string line, last;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      last = line;
    }
  }
  return nlohmann::json::parse(last);
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("help text matches the golden copy") {
  const Run r = cli({"--help"});
  CHECK(r.code == kExitOk);
  CHECK(r.out == golden("help.txt"));
  const Run fit = cli({"fit", "--help"});
  CHECK(fit.code == kExitOk);
  CHECK(fit.out == golden("help_fit.txt"));
}

TEST_CASE("usage errors exit 1 with a tagged message") {
  for (const auto &args : std::vector<std::vector<std::string>>{
           {}, {"frobnicate"}, {"upsample", "only_input.ply"}, {"upsample", "a.ply", "b.ply", "--q", "0"}}) {
    const Run r = cli(args);
    CHECK(r.code == kExitUsage);
    CHECK(r.err.rfind("error:cli:usage: ", 0) == 0);
  }
  const Run unknown = cli({"fit", fixture("sphere.json"), "--set", "trainer.nonsense=1"});
  CHECK(unknown.code == kExitUsage);
  CHECK(unknown.err.rfind("error:trainer:config: ", 0) == 0);
}

TEST_CASE("runtime errors exit 2 with a tagged message") {
  const Run r = cli({"upsample", "/nonexistent/in.ply", "/tmp/out.ply"});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.rfind("error:pointcloud:load: ", 0) == 0);
  const Run m = cli({"mesh", "/nonexistent.p23d", "--out", "/tmp/x.obj"});
  CHECK(m.code == kExitRuntime);
  CHECK(m.err.rfind("error:field:", 0) == 0);
}

TEST_CASE("upsample two points") {
  const auto dir = scratch_dir("cli_upsample");
  const Run r = cli({"upsample", fixture("two_points.ply"), dir + "/up.ply", "--q", "1", "--n", "1"});
  REQUIRE(r.code == kExitOk);
  CHECK(last_json(r.out)["output_points"] == 3);
  CHECK(load_point_cloud(dir + "/up.ply").size() == 3);
}

TEST_CASE("fit, render, mesh and eval") {
  const auto dir = scratch_dir("cli_pipeline");
  const Run fit = cli({"--threads", "2", "fit", fixture("sphere.json"), "--out-dir", dir + "/run", "--set",
                       "trainer.iterations=3", "--set", "field.resolution=[20,20,20]", "--set",
                       "trainer.batch_size=2048", "--set", "camera.width=16", "--set", "camera.height=16"});
  REQUIRE(fit.code == kExitOk);
  const std::string ckpt = dir + "/run/final.p23d";
  CHECK(load_checkpoint(ckpt).resolution() == Resolution{20, 20, 20});
  CHECK(last_json(fit.out).contains("checkpoint"));

  const Run render = cli({"render", ckpt, "--orbit", "2", "--width", "8", "--height", "6", "--samples", "16",
                          "--out", dir + "/views"});
  REQUIRE(render.code == kExitOk);
  for (const char *suffix : {"latent.pfm", "depth.pfm", "coverage.pfm", "latent.png", "depth.png"}) {
    CHECK(std::filesystem::exists(dir + "/views/view_001_" + std::string(suffix)));
  }
  const Run no_pose = cli({"render", ckpt});
  CHECK(no_pose.code == kExitUsage);

  // a painted blob is meshed, then scored against itself
  FieldInit init;
  init.mode = FieldInit::Mode::Blob;
  init.peak = 100.0;
  const VoxelField blob = init_field({24, 24, 24}, Aabb{{-1, -1, -1}, {1, 1, 1}}, init, 1.0);
  save_checkpoint(blob, dir + "/blob.p23d");
  const Run mesh = cli({"mesh", dir + "/blob.p23d", "--iso", "10", "--out", dir + "/blob.ply", "--normals"});
  REQUIRE(mesh.code == kExitOk);
  const auto mj = last_json(mesh.out);
  CHECK(mj["boundary_edges"] == 0);
  CHECK(mj["euler"] == 2);
  CHECK(load_mesh(dir + "/blob.ply").normals.size() == mj["vertices"].get<std::size_t>());

  const Run eval = cli({"eval", dir + "/blob.ply", dir + "/blob.ply", "--samples", "4000", "--tau", "0.05"});
  REQUIRE(eval.code == kExitOk);
  CHECK(last_json(eval.out)["fscore"].get<double>() > 0.95);

  const Run bad_alpha = cli({"mesh", dir + "/blob.p23d", "--iso-alpha", "1.5", "--out", dir + "/x.obj"});
  CHECK(bad_alpha.code == kExitUsage);
}

} // TEST_SUITE
