#include "p23d/guidance.hpp"

#include <json.hpp>

#include <arpa/inet.h>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <netdb.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

namespace p23d {

namespace {

[[noreturn]] void protocol_error(const std::string &what, std::size_t offset) {
  throw Error("guidance", "protocol", what + " at byte offset " + std::to_string(offset));
}

[[noreturn]] void transport_error(const std::string &what) { throw Error("guidance", "transport", what); }

template <class T> void put(std::vector<std::uint8_t> &buf, T v) {
  const auto *p = reinterpret_cast<const std::uint8_t *>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

template <class T> T get(std::span<const std::uint8_t> buf, std::size_t off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

void put_floats(std::vector<std::uint8_t> &buf, const std::vector<float> &v) {
  const auto *p = reinterpret_cast<const std::uint8_t *>(v.data());
  buf.insert(buf.end(), p, p + v.size() * sizeof(float));
}

std::vector<float> get_floats(std::span<const std::uint8_t> buf, std::size_t off, std::size_t count) {
  std::vector<float> v(count);
  std::memcpy(v.data(), buf.data() + off, count * sizeof(float));
  return v;
}

std::size_t check_shape(int width, int height, int channels) {
  if (width < 1 || height < 1 || channels < 1) {
    throw Error("guidance", "protocol", "negotiated image shape must be positive");
  }
  return static_cast<std::size_t>(width) * height;
}

nlohmann::json parse_json_payload(const wire::Frame &f, const char *what) {
  try {
    return nlohmann::json::parse(f.payload.begin(), f.payload.end());
  } catch (const nlohmann::json::exception &e) {
    protocol_error(std::string(what) + " payload is not valid JSON (" + e.what() + ")", wire::kHeaderSize);
  }
}

} // namespace

namespace wire {

std::vector<std::uint8_t> encode_frame(const Frame &frame) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + frame.payload.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put<std::uint16_t>(out, kVersion);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(frame.type));
  put<std::uint64_t>(out, frame.payload.size());
  out.insert(out.end(), frame.payload.begin(), frame.payload.end());
  return out;
}

std::pair<MsgType, std::uint64_t> decode_header(std::span<const std::uint8_t> header) {
  if (header.size() < kHeaderSize) {
    protocol_error("truncated frame header", header.size());
  }
  if (std::memcmp(header.data(), kMagic.data(), 4) != 0) {
    protocol_error("bad frame magic", 0);
  }
  const auto version = get<std::uint16_t>(header, 4);
  if (version != kVersion) {
    protocol_error("unsupported protocol version " + std::to_string(version), 4);
  }
  const auto type = get<std::uint16_t>(header, 6);
  if (type < 1 || type > 5) {
    protocol_error("unknown msg_type " + std::to_string(type), 6);
  }
  const auto len = get<std::uint64_t>(header, 8);
  if (len > kMaxPayload) {
    protocol_error("payload length " + std::to_string(len) + " exceeds limit", 8);
  }
  return {static_cast<MsgType>(type), len};
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  const auto [type, len] = decode_header(bytes);
  if (bytes.size() < kHeaderSize + len) {
    protocol_error("truncated frame payload (" + std::to_string(bytes.size() - kHeaderSize) + " of " +
                       std::to_string(len) + " bytes)",
                   bytes.size());
  }
  if (bytes.size() > kHeaderSize + len) {
    protocol_error("trailing bytes after frame", kHeaderSize + len);
  }
  Frame f;
  f.type = type;
  f.payload.assign(bytes.begin() + kHeaderSize, bytes.end());
  return f;
}

Frame encode_hello(const Hello &h) {
  const nlohmann::json j = {{"width", h.width},   {"height", h.height}, {"channels", h.channels},
                            {"prompt", h.prompt}, {"seed", h.seed}};
  const std::string s = j.dump();
  return {MsgType::Hello, std::vector<std::uint8_t>(s.begin(), s.end())};
}

Hello decode_hello(const Frame &f) {
  if (f.type != MsgType::Hello) {
    protocol_error("expected HELLO", 6);
  }
  const auto j = parse_json_payload(f, "HELLO");
  try {
    Hello h;
    h.width = j.at("width").get<int>();
    h.height = j.at("height").get<int>();
    h.channels = j.at("channels").get<int>();
    h.prompt = j.at("prompt").get<std::string>();
    h.seed = j.at("seed").get<std::uint64_t>();
    return h;
  } catch (const nlohmann::json::exception &e) {
    protocol_error(std::string("HELLO payload missing or mistyped key (") + e.what() + ")", kHeaderSize);
  }
}

Frame encode_hello_ack(const HelloAck &a) {
  const nlohmann::json j = {{"provider", a.provider}, {"deterministic", a.deterministic}};
  const std::string s = j.dump();
  return {MsgType::HelloAck, std::vector<std::uint8_t>(s.begin(), s.end())};
}

HelloAck decode_hello_ack(const Frame &f) {
  if (f.type != MsgType::HelloAck) {
    protocol_error("expected HELLO_ACK", 6);
  }
  const auto j = parse_json_payload(f, "HELLO_ACK");
  try {
    return {j.at("provider").get<std::string>(), j.at("deterministic").get<bool>()};
  } catch (const nlohmann::json::exception &e) {
    protocol_error(std::string("HELLO_ACK payload missing or mistyped key (") + e.what() + ")", kHeaderSize);
  }
}

Frame encode_request(const GuidanceRequest &r) {
  r.validate();
  Frame f{MsgType::Request, {}};
  const std::size_t px = static_cast<std::size_t>(r.width) * r.height;
  f.payload.reserve(4 + 64 + 4 * px * (r.channels + 2));
  put<std::uint32_t>(f.payload, r.iteration);
  for (float v : r.pose) {
    put<float>(f.payload, v);
  }
  put_floats(f.payload, r.latent);
  put_floats(f.payload, r.depth);
  put_floats(f.payload, r.coverage);
  return f;
}

GuidanceRequest decode_request(const Frame &f, int width, int height, int channels) {
  if (f.type != MsgType::Request) {
    protocol_error("expected REQUEST", 6);
  }
  const std::size_t px = check_shape(width, height, channels);
  const std::size_t expected = 4 + 64 + 4 * px * (channels + 2);
  if (f.payload.size() != expected) {
    protocol_error("REQUEST payload is " + std::to_string(f.payload.size()) + " bytes, expected " +
                       std::to_string(expected),
                   8);
  }
  const std::span<const std::uint8_t> p(f.payload);
  GuidanceRequest r;
  r.width = width;
  r.height = height;
  r.channels = channels;
  r.iteration = get<std::uint32_t>(p, 0);
  for (int i = 0; i < 16; ++i) {
    r.pose[i] = get<float>(p, 4 + 4 * i);
  }
  std::size_t off = 68;
  r.latent = get_floats(p, off, px * channels);
  off += 4 * px * channels;
  r.depth = get_floats(p, off, px);
  off += 4 * px;
  r.coverage = get_floats(p, off, px);
  return r;
}

Frame encode_response(const GuidanceResponse &r) {
  Frame f{MsgType::Response, {}};
  f.payload.reserve(4 + 4 * r.grad.size());
  put<float>(f.payload, r.diagnostic_loss);
  put_floats(f.payload, r.grad);
  return f;
}

GuidanceResponse decode_response(const Frame &f, int width, int height, int channels) {
  if (f.type != MsgType::Response) {
    protocol_error("expected RESPONSE", 6);
  }
  const std::size_t n = check_shape(width, height, channels) * channels;
  const std::size_t expected = 4 + 4 * n;
  if (f.payload.size() != expected) {
    protocol_error("RESPONSE payload is " + std::to_string(f.payload.size()) + " bytes, expected " +
                       std::to_string(expected),
                   8);
  }
  const std::span<const std::uint8_t> p(f.payload);
  GuidanceResponse r;
  r.diagnostic_loss = get<float>(p, 0);
  if (!std::isfinite(r.diagnostic_loss)) {
    protocol_error("non-finite diagnostic loss", kHeaderSize);
  }
  r.grad = get_floats(p, 4, n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(r.grad[i])) {
      protocol_error("non-finite gradient entry " + std::to_string(i), kHeaderSize + 4 + 4 * i);
    }
  }
  return r;
}

} // namespace wire

void GuidanceRequest::validate() const {
  const std::size_t px = check_shape(width, height, channels);
  if (latent.size() != px * channels || depth.size() != px || coverage.size() != px) {
    throw Error("guidance", "shape", "request arrays do not match the declared image shape");
  }
  auto finite = [](const std::vector<float> &v) {
    return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
  };
  if (!finite(latent) || !finite(depth) || !finite(coverage)) {
    throw Error("guidance", "shape", "request contains non-finite values");
  }
}

GuidanceRequest make_guidance_request(const RenderOutput &output, std::uint32_t iteration) {
  GuidanceRequest r;
  r.iteration = iteration;
  for (int i = 0; i < 16; ++i) {
    r.pose[i] = static_cast<float>(output.camera.pose[i]);
  }
  r.width = output.width;
  r.height = output.height;
  r.channels = kLatentChannels;
  r.latent.assign(output.latent.begin(), output.latent.end());
  const auto depth = normalized_depth(output);
  r.depth.assign(depth.begin(), depth.end());
  r.coverage.assign(output.coverage.begin(), output.coverage.end());
  return r;
}

namespace {
constexpr char kLatMagic[4] = {'L', 'A', 'T', '0'};
}

LatentImage read_latent(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("guidance", "target", path + ": cannot open");
  }
  char magic[4];
  std::uint32_t dims[3];
  in.read(magic, 4);
  in.read(reinterpret_cast<char *>(dims), sizeof(dims));
  if (!in || std::memcmp(magic, kLatMagic, 4) != 0) {
    throw Error("guidance", "target", path + ": not a LAT0 latent file");
  }
  LatentImage img;
  img.height = static_cast<int>(dims[0]);
  img.width = static_cast<int>(dims[1]);
  img.channels = static_cast<int>(dims[2]);
  img.data.resize(std::size_t{dims[0]} * dims[1] * dims[2]);
  in.read(reinterpret_cast<char *>(img.data.data()), static_cast<std::streamsize>(img.data.size() * 4));
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    throw Error("guidance", "target", path + ": payload size does not match the header");
  }
  return img;
}

void write_latent(const LatentImage &img, const std::string &path) {
  if (img.data.size() != static_cast<std::size_t>(img.height) * img.width * img.channels) {
    throw Error("guidance", "target", "latent data size does not match its shape");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw Error("guidance", "target", path + ": cannot open for writing");
  }
  const std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.height), static_cast<std::uint32_t>(img.width),
                                 static_cast<std::uint32_t>(img.channels)};
  out.write(kLatMagic, 4);
  out.write(reinterpret_cast<const char *>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char *>(img.data.data()), static_cast<std::streamsize>(img.data.size() * 4));
  if (!out) {
    throw Error("guidance", "target", path + ": write failed");
  }
}

GuidanceResponse mock_photometric_guidance(const GuidanceRequest &request, std::span<const float> target) {
  if (target.size() != request.latent.size()) {
    throw Error("guidance", "shape", "target latent shape does not match the request");
  }
  GuidanceResponse r;
  r.grad.resize(target.size());
  float sum = 0.0f;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const float d = request.latent[i] - target[i];
    r.grad[i] = d;
    sum += d * d;
  }
  r.diagnostic_loss = target.empty() ? 0.0f : 0.5f * (sum / static_cast<float>(target.size()));
  return r;
}

GuidanceResponse MockGuidance::request(const GuidanceRequest &request) {
  if (target_.height != request.height || target_.width != request.width ||
      target_.channels != request.channels) {
    throw Error("guidance", "shape", "mock target shape does not match the request");
  }
  return mock_photometric_guidance(request, target_.data);
}

// ---------------------------------------------------------------------------

FdTransport::FdTransport(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) {}

FdTransport::~FdTransport() { FdTransport::close(); }

void FdTransport::write_all(std::span<const std::uint8_t> bytes) {
  if (write_fd_ < 0) {
    transport_error("write on a closed transport");
  }
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::send(write_fd_, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL);
    if (n < 0 && errno == ENOTSOCK) {
      const ssize_t m = ::write(write_fd_, bytes.data() + done, bytes.size() - done);
      if (m < 0) {
        if (errno == EINTR) {
          continue;
        }
        transport_error(std::string("write failed: ") + std::strerror(errno));
      }
      done += static_cast<std::size_t>(m);
      continue;
    }
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      transport_error(std::string("send failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

bool FdTransport::read_exact(std::span<std::uint8_t> bytes) {
  if (read_fd_ < 0) {
    transport_error("read on a closed transport");
  }
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::read(read_fd_, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) {
        continue;
      }
      transport_error(std::string("read failed: ") + std::strerror(errno));
    }
    if (n == 0) {
      if (done == 0) {
        return false;
      }
      transport_error("connection closed mid-message after " + std::to_string(done) + " of " +
                      std::to_string(bytes.size()) + " bytes");
    }
    done += static_cast<std::size_t>(n);
  }
  return true;
}

void FdTransport::close() {
  if (read_fd_ >= 0) {
    ::close(read_fd_);
  }
  if (write_fd_ >= 0 && write_fd_ != read_fd_) {
    ::close(write_fd_);
  }
  read_fd_ = write_fd_ = -1;
}

namespace {

class ChildTransport final : public FdTransport {
public:
  ChildTransport(int read_fd, int write_fd, pid_t pid) : FdTransport(read_fd, write_fd), pid_(pid) {}
  ~ChildTransport() override { ChildTransport::close(); }
  void close() override {
    FdTransport::close();
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

private:
  pid_t pid_;
};

} // namespace

std::unique_ptr<Transport> connect_tcp(const std::string &host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo *res = nullptr;
  const std::string service = std::to_string(port);
  if (const int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &res); rc != 0) {
    transport_error("cannot resolve " + host + ": " + ::gai_strerror(rc));
  }
  int fd = -1;
  for (addrinfo *ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) {
      continue;
    }
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
      break;
    }
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) {
    transport_error("cannot connect to " + host + ":" + service);
  }
  return std::make_unique<FdTransport>(fd, fd);
}

std::unique_ptr<Transport> spawn_stdio(const std::string &command) {
  int to_child[2], from_child[2];
  if (::pipe(to_child) != 0) {
    transport_error(std::string("pipe failed: ") + std::strerror(errno));
  }
  if (::pipe(from_child) != 0) {
    ::close(to_child[0]);
    ::close(to_child[1]);
    transport_error(std::string("pipe failed: ") + std::strerror(errno));
  }
  const pid_t pid = ::fork();
  if (pid < 0) {
    transport_error(std::string("fork failed: ") + std::strerror(errno));
  }
  if (pid == 0) {
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char *>(nullptr));
    ::_exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  // A child that exits early must not kill us with SIGPIPE.
  std::signal(SIGPIPE, SIG_IGN);
  return std::make_unique<ChildTransport>(from_child[0], to_child[1], pid);
}

std::unique_ptr<Transport> open_transport(const std::string &address) {
  if (address.rfind("tcp://", 0) == 0) {
    const std::string rest = address.substr(6);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) {
      throw Error("guidance", "address", "tcp address needs host:port: " + address);
    }
    int port = 0;
    try {
      port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception &) {
      throw Error("guidance", "address", "bad port in " + address);
    }
    return connect_tcp(rest.substr(0, colon), port);
  }
  if (address.rfind("stdio:", 0) == 0) {
    return spawn_stdio(address.substr(6));
  }
  throw Error("guidance", "address", "unrecognised bridge address '" + address + "' (tcp://host:port or stdio:cmd)");
}

void send_frame(Transport &t, const wire::Frame &frame) { t.write_all(wire::encode_frame(frame)); }

wire::Frame receive_frame(Transport &t) {
  std::array<std::uint8_t, wire::kHeaderSize> header{};
  if (!t.read_exact(header)) {
    transport_error("connection closed by peer");
  }
  const auto [type, len] = wire::decode_header(header);
  wire::Frame f;
  f.type = type;
  f.payload.resize(len);
  if (len > 0 && !t.read_exact(f.payload)) {
    transport_error("connection closed mid-message after the frame header");
  }
  return f;
}

RemoteGuidance::~RemoteGuidance() {
  try {
    close();
  } catch (...) {
  }
}

void RemoteGuidance::open(const wire::Hello &hello) {
  hello_ = hello;
  send_frame(*transport_, wire::encode_hello(hello));
  const wire::Frame f = receive_frame(*transport_);
  if (f.type == wire::MsgType::Shutdown) {
    transport_->close();
    throw Error("guidance", "protocol", "bridge refused the session (SHUTDOWN in reply to HELLO)");
  }
  try {
    ack_ = wire::decode_hello_ack(f);
  } catch (...) {
    transport_->close();
    throw;
  }
  open_ = true;
}

GuidanceResponse RemoteGuidance::request(const GuidanceRequest &request) {
  if (!open_) {
    throw Error("guidance", "protocol", "REQUEST before the HELLO handshake completed");
  }
  if (request.width != hello_.width || request.height != hello_.height || request.channels != hello_.channels) {
    throw Error("guidance", "shape", "request shape differs from the negotiated shape");
  }
  try {
    send_frame(*transport_, wire::encode_request(request));
    const wire::Frame f = receive_frame(*transport_);
    if (f.type == wire::MsgType::Shutdown) {
      throw Error("guidance", "protocol", "bridge sent SHUTDOWN instead of RESPONSE");
    }
    return wire::decode_response(f, hello_.width, hello_.height, hello_.channels);
  } catch (...) {
    open_ = false;
    transport_->close();
    throw;
  }
}

void RemoteGuidance::close() {
  if (open_) {
    open_ = false;
    try {
      send_frame(*transport_, {wire::MsgType::Shutdown, {}});
    } catch (const Error &) {
    }
  }
  if (transport_) {
    transport_->close();
  }
}

FieldGradients apply_sds_gradient(const VoxelField &field, const GuidanceResponse &response,
                                  const RenderOutput &tape, double lambda_sds) {
  if (response.grad.size() != tape.rays() * kLatentChannels) {
    throw Error("guidance", "shape", "response gradient does not match the rendered view");
  }
  const std::vector<double> g(response.grad.begin(), response.grad.end());
  FieldGradients grads = backprop_pixel_gradients(field, tape, g);
  grads.scale(lambda_sds);
  return grads;
}

} // namespace p23d
