// Writes the golden guidance fixture set: a HELLO/HELLO_ACK pair, REQUEST
// frames rendered from a painted field with the mock RESPONSE for each, the
// mock target latent, and malformed frames with the byte offset each fault
// is reported at.
//
//   make_guidance_fixtures <out_dir>

#include "p23d/field.hpp"
#include "p23d/guidance.hpp"
#include "p23d/render.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace p23d;
using nlohmann::json;

namespace {

constexpr int kWidth = 16, kHeight = 16;
constexpr int kFrames = 24;

void write_bytes(const std::filesystem::path &path, const std::vector<std::uint8_t> &bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw Error("guidance", "io", "cannot write " + path.string());
  }
}

VoxelField painted_field() {
  FieldInit init;
  init.mode = FieldInit::Mode::Blob;
  init.radius = 0.35;
  init.peak = 40.0;
  VoxelField f = init_field({24, 24, 24}, Aabb{{-1, -1, -1}, {1, 1, 1}}, init);
  auto lat = f.latent_mut();
  const Resolution &r = f.resolution();
  for (int k = 0; k < r[2]; ++k) {
    for (int j = 0; j < r[1]; ++j) {
      for (int i = 0; i < r[0]; ++i) {
        const Vec3 p = f.vertex_position(i, j, k);
        const std::size_t v = f.vertex_index(i, j, k);
        lat[v * 4 + 0] = std::sin(3.0 * p.x);
        lat[v * 4 + 1] = std::cos(2.0 * p.y);
        lat[v * 4 + 2] = p.z;
        lat[v * 4 + 3] = p.x * p.y;
      }
    }
  }
  f.background_mut() = {0.1, -0.2, 0.3, -0.4};
  return f;
}

LatentImage target_image() {
  LatentImage t{kHeight, kWidth, kLatentChannels, {}};
  t.data.resize(static_cast<std::size_t>(kWidth) * kHeight * kLatentChannels);
  for (int y = 0; y < kHeight; ++y) {
    for (int x = 0; x < kWidth; ++x) {
      for (int c = 0; c < kLatentChannels; ++c) {
        t.data[(static_cast<std::size_t>(y) * kWidth + x) * kLatentChannels + c] =
            static_cast<float>(0.5 * std::sin(0.4 * x + 0.7 * y + 1.3 * c));
      }
    }
  }
  return t;
}

void put_u16(std::vector<std::uint8_t> &b, std::size_t at, std::uint16_t v) {
  b[at] = static_cast<std::uint8_t>(v & 0xff);
  b[at + 1] = static_cast<std::uint8_t>(v >> 8);
}

void put_u64(std::vector<std::uint8_t> &b, std::size_t at, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
}

void put_f32(std::vector<std::uint8_t> &b, std::size_t at, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  for (int i = 0; i < 4; ++i) {
    b[at + i] = static_cast<std::uint8_t>(u >> (8 * i));
  }
}

} // namespace

int main(int argc, char **argv) {
  if (argc != 2) {
    std::cerr << "usage: make_guidance_fixtures <out_dir>\n";
    return 1;
  }
  try {
    const std::filesystem::path dir = argv[1];
    std::filesystem::create_directories(dir);

    const wire::Hello hello{kWidth, kHeight, kLatentChannels, "a red teapot", 7};
    const wire::HelloAck ack{"mock", true};
    write_bytes(dir / "hello.bin", wire::encode_frame(wire::encode_hello(hello)));
    write_bytes(dir / "hello_ack.bin", wire::encode_frame(wire::encode_hello_ack(ack)));
    write_bytes(dir / "shutdown.bin", wire::encode_frame({wire::MsgType::Shutdown, {}}));

    const LatentImage target = target_image();
    write_latent(target, (dir / "target.lat").string());

    const VoxelField field = painted_field();
    RenderSettings rs;
    rs.samples_per_ray = 32;
    rs.near = 0.2;
    rs.far = 3.0;
    json pairs = json::array();
    std::vector<std::uint8_t> first_request, first_response;
    for (int i = 0; i < kFrames; ++i) {
      const Camera cam = orbit_camera(1.6, -10.0 + 5.0 * (i % 6), 15.0 * i, 45.0, kWidth, kHeight);
      rs.seed = static_cast<std::uint64_t>(i);
      const RenderOutput out = render(field, cam, rs);
      const GuidanceRequest req = make_guidance_request(out, static_cast<std::uint32_t>(10 * i));
      const GuidanceResponse resp = mock_photometric_guidance(req, target.data);
      char name[64];
      std::snprintf(name, sizeof(name), "request_%03d.bin", i);
      const std::string req_name = name;
      std::snprintf(name, sizeof(name), "response_%03d.bin", i);
      const std::string resp_name = name;
      const auto req_bytes = wire::encode_frame(wire::encode_request(req));
      const auto resp_bytes = wire::encode_frame(wire::encode_response(resp));
      write_bytes(dir / req_name, req_bytes);
      write_bytes(dir / resp_name, resp_bytes);
      if (i == 0) {
        first_request = req_bytes;
        first_response = resp_bytes;
      }
      pairs.push_back({{"request", req_name}, {"response", resp_name}, {"diagnostic_loss", resp.diagnostic_loss}});
    }

    // Malformed frames, each derived from a valid one.
    json malformed = json::array();
    auto add = [&](const std::string &file, const std::string &direction, std::size_t offset,
                   const std::string &fault, const std::vector<std::uint8_t> &bytes) {
      write_bytes(dir / file, bytes);
      malformed.push_back({{"file", file}, {"direction", direction}, {"offset", offset}, {"fault", fault}});
    };
    {
      auto b = first_request;
      b[3] = 'X';
      add("bad_magic.bin", "request", 0, "bad frame magic", b);
    }
    {
      auto b = first_request;
      put_u16(b, 4, 2);
      add("bad_version.bin", "request", 4, "unsupported protocol version", b);
    }
    {
      auto b = first_request;
      put_u16(b, 6, 9);
      add("unknown_type.bin", "request", 6, "unknown msg_type", b);
    }
    {
      auto b = first_request;
      put_u64(b, 8, wire::kMaxPayload + 1);
      b.resize(wire::kHeaderSize);
      add("oversize_length.bin", "request", 8, "payload length exceeds limit", b);
    }
    {
      auto b = first_request;
      b.resize(b.size() - 4);
      put_u64(b, 8, b.size() - wire::kHeaderSize);
      add("short_request.bin", "request", 8, "payload size does not match the negotiated shape", b);
    }
    {
      auto b = first_request;
      b.resize(10);
      add("truncated_header.bin", "request", 10, "truncated frame header", b);
    }
    {
      auto b = first_request;
      b.resize(b.size() / 2);
      add("truncated_payload.bin", "request", b.size(), "truncated frame payload", b);
    }
    {
      auto b = first_response;
      put_f32(b, wire::kHeaderSize, std::nanf(""));
      add("nan_loss_response.bin", "response", wire::kHeaderSize, "non-finite diagnostic loss", b);
    }
    {
      auto b = first_response;
      const std::size_t entry = 37;
      const std::size_t at = wire::kHeaderSize + 4 + 4 * entry;
      put_f32(b, at, INFINITY);
      add("inf_grad_response.bin", "response", at, "non-finite gradient entry", b);
    }

    json manifest{{"width", kWidth},
                  {"height", kHeight},
                  {"channels", kLatentChannels},
                  {"hello", "hello.bin"},
                  {"hello_ack", "hello_ack.bin"},
                  {"shutdown", "shutdown.bin"},
                  {"target", "target.lat"},
                  {"pairs", pairs},
                  {"malformed", malformed}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
    std::cout << "wrote " << kFrames << " request/response pairs and " << malformed.size()
              << " malformed frames to " << dir.string() << '\n';
    return 0;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
