#pragma once

#include "p23d/common.hpp"
#include "p23d/field.hpp"
#include "p23d/render.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace p23d {

// ---------------------------------------------------------------------------
// Wire protocol. Every frame is
//   "P23D" | u16 version (=1) | u16 msg_type | u64 payload_len | payload
// little-endian throughout.

namespace wire {

inline constexpr std::array<char, 4> kMagic{'P', '2', '3', 'D'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::uint64_t kMaxPayload = std::uint64_t{1} << 30;

enum class MsgType : std::uint16_t { Hello = 1, HelloAck = 2, Request = 3, Response = 4, Shutdown = 5 };

struct Frame {
  MsgType type = MsgType::Shutdown;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> encode_frame(const Frame &frame);

/// Parses exactly one frame from `bytes`. Truncation, trailing bytes, bad
/// magic/version or an unknown msg_type raise Error{"guidance","protocol"}
/// with the byte offset of the fault.
Frame decode_frame(std::span<const std::uint8_t> bytes);

/// Validates a 16-byte header and returns (type, payload length).
std::pair<MsgType, std::uint64_t> decode_header(std::span<const std::uint8_t> header);

struct Hello {
  int width = 64, height = 64, channels = kLatentChannels;
  std::string prompt;
  std::uint64_t seed = 0;
};

struct HelloAck {
  std::string provider;
  bool deterministic = false;
};

Frame encode_hello(const Hello &h);
Hello decode_hello(const Frame &f);
Frame encode_hello_ack(const HelloAck &a);
HelloAck decode_hello_ack(const Frame &f);

} // namespace wire

struct GuidanceRequest {
  std::uint32_t iteration = 0;
  std::array<float, 16> pose{};
  int width = 64, height = 64, channels = kLatentChannels;
  std::vector<float> latent;   // H*W*C, interleaved per pixel
  std::vector<float> depth;    // H*W, normalized
  std::vector<float> coverage; // H*W

  void validate() const;
};

struct GuidanceResponse {
  float diagnostic_loss = 0.0f;
  std::vector<float> grad; // dL/dx, H*W*C
};

namespace wire {
Frame encode_request(const GuidanceRequest &r);
GuidanceRequest decode_request(const Frame &f, int width, int height, int channels);
Frame encode_response(const GuidanceResponse &r);
/// Checks payload length against the negotiated shape and every value for
/// finiteness; faults are protocol errors naming the frame byte offset.
GuidanceResponse decode_response(const Frame &f, int width, int height, int channels);
} // namespace wire

/// Packs a render into a request: float32 latent, per-frame normalized depth
/// and per-pixel coverage.
GuidanceRequest make_guidance_request(const RenderOutput &output, std::uint32_t iteration);

/// Row-major H x W x C float32 latent image.
struct LatentImage {
  int height = 0, width = 0, channels = 0;
  std::vector<float> data;
};

/// File layout: "LAT0" | u32 H | u32 W | u32 C | f32 data[H*W*C].
LatentImage read_latent(const std::string &path);
void write_latent(const LatentImage &img, const std::string &path);

/// grad = latent - target (float32, element order); loss = 0.5 * mean of the
/// squared residual accumulated sequentially in float32.
GuidanceResponse mock_photometric_guidance(const GuidanceRequest &request, std::span<const float> target);

/// Source of dL/dx for a rendered view.
class GuidanceProvider {
public:
  virtual ~GuidanceProvider() = default;
  virtual void open(const wire::Hello &hello) { (void)hello; }
  virtual GuidanceResponse request(const GuidanceRequest &request) = 0;
  virtual void close() {}
  virtual std::string name() const = 0;
};

/// In-process photometric mock against a fixed latent target.
class MockGuidance final : public GuidanceProvider {
public:
  explicit MockGuidance(LatentImage target) : target_(std::move(target)) {}
  GuidanceResponse request(const GuidanceRequest &request) override;
  std::string name() const override { return "mock"; }

private:
  LatentImage target_;
};

// ---------------------------------------------------------------------------
// Transports

class Transport {
public:
  virtual ~Transport() = default;
  virtual void write_all(std::span<const std::uint8_t> bytes) = 0;
  /// Reads exactly bytes.size() bytes. Returns false on a clean EOF before the
  /// first byte; throws a transport error on EOF part way through.
  virtual bool read_exact(std::span<std::uint8_t> bytes) = 0;
  virtual void close() = 0;
};

/// Blocking file-descriptor transport (sockets, pipes). Owns the descriptors.
class FdTransport : public Transport {
public:
  FdTransport(int read_fd, int write_fd);
  ~FdTransport() override;
  FdTransport(const FdTransport &) = delete;
  FdTransport &operator=(const FdTransport &) = delete;

  void write_all(std::span<const std::uint8_t> bytes) override;
  bool read_exact(std::span<std::uint8_t> bytes) override;
  void close() override;

protected:
  int read_fd_ = -1, write_fd_ = -1;
};

std::unique_ptr<Transport> connect_tcp(const std::string &host, int port);
/// Runs `/bin/sh -c command` with its stdin/stdout as the transport.
std::unique_ptr<Transport> spawn_stdio(const std::string &command);
/// "tcp://host:port" or "stdio:<command>".
std::unique_ptr<Transport> open_transport(const std::string &address);

void send_frame(Transport &t, const wire::Frame &frame);
/// Reads one frame; an EOF between frames is a transport error.
wire::Frame receive_frame(Transport &t);

/// Client side of the bridge protocol.
class RemoteGuidance final : public GuidanceProvider {
public:
  explicit RemoteGuidance(std::unique_ptr<Transport> transport) : transport_(std::move(transport)) {}
  ~RemoteGuidance() override;

  void open(const wire::Hello &hello) override;
  GuidanceResponse request(const GuidanceRequest &request) override;
  void close() override;
  std::string name() const override { return "remote:" + ack_.provider; }
  const wire::HelloAck &ack() const { return ack_; }

private:
  std::unique_ptr<Transport> transport_;
  wire::Hello hello_;
  wire::HelloAck ack_;
  bool open_ = false;
};

/// lambda_sds * backprop of response.grad through the render tape; the depth
/// condition receives no gradient.
FieldGradients apply_sds_gradient(const VoxelField &field, const GuidanceResponse &response,
                                  const RenderOutput &tape, double lambda_sds);

} // namespace p23d
