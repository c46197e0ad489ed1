#pragma once

// Thin blocking-socket layer. Sockets are RAII handles; shutdown() may be
// called from another thread to unblock a reader or writer.

#include <chrono>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gftp/wire.hpp"

namespace gftp::net {

using Millis = std::chrono::milliseconds;
inline constexpr Millis kForever{-1};

// Ignore SIGPIPE process-wide; writes report EPIPE instead.
void ignore_sigpipe();

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket();
  Socket(Socket&& other) noexcept;
  Socket& operator=(Socket&& other) noexcept;
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  // buffer_size, when nonzero, is applied to SO_SNDBUF/SO_RCVBUF before connecting.
  static Socket connect(const wire::DataEndpoint& ep, Millis timeout = Millis{5000},
                        std::size_t buffer_size = 0);

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }

  void write_all(std::span<const std::byte> data);
  void write_all(std::string_view data);
  // Returns 0 at end of stream. Throws Error(Timeout) when nothing arrives in time.
  std::size_t read_some(std::span<std::byte> out, Millis timeout = kForever);

  void shutdown() const noexcept;
  void shutdown_write() const noexcept;
  void close() noexcept;

  void set_buffer_size(std::size_t bytes);
  void set_send_timeout(Millis timeout);
  void set_nodelay();

  wire::DataEndpoint local_endpoint() const;
  wire::DataEndpoint peer_endpoint() const;
  // Nonblocking liveness probe: true if the peer has closed or the socket errored.
  bool peer_closed() const;

 private:
  int fd_ = -1;
};

class Listener {
 public:
  Listener() = default;
  ~Listener();
  Listener(Listener&& other) noexcept;
  Listener& operator=(Listener&& other) noexcept;
  Listener(const Listener&) = delete;
  Listener& operator=(const Listener&) = delete;

  // port 0 picks an ephemeral port. Throws Error(BindFailure).
  static Listener bind(const std::string& host, std::uint16_t port, std::size_t buffer_size = 0);
  // First free port in [low, high]. Throws Error(BindFailure) when exhausted.
  static Listener bind_in_range(const std::string& host, std::uint16_t low, std::uint16_t high,
                                std::size_t buffer_size = 0);

  // nullopt on timeout or after shutdown().
  std::optional<Socket> accept(Millis timeout = kForever);

  bool valid() const noexcept { return fd_ >= 0; }
  wire::DataEndpoint endpoint() const;
  void shutdown() const noexcept;
  void close() noexcept;

 private:
  explicit Listener(int fd) : fd_(fd) {}
  int fd_ = -1;
};

// Buffered reader over a socket: CRLF lines for the control channel and a
// ByteSource for extended-block decoding.
class BufferedReader final : public wire::ByteSource {
 public:
  explicit BufferedReader(Socket& socket, Millis timeout = kForever)
      : socket_(&socket), timeout_(timeout) {}

  // Line without its terminator; nullopt at end of stream. Throws
  // Error(MalformedLine) past max_length.
  std::optional<std::string> read_line(std::size_t max_length = wire::kMaxLineLength);
  std::size_t read(std::span<std::byte> out) override;

  void set_timeout(Millis timeout) { timeout_ = timeout; }
  std::size_t buffered() const noexcept { return buffer_.size() - pos_; }

 private:
  bool fill();

  Socket* socket_;
  Millis timeout_;
  std::vector<std::byte> buffer_;
  std::size_t pos_ = 0;
};

// Resolves "localhost"-style names to a numeric address; numeric input is
// returned unchanged.
std::string resolve_host(const std::string& host);

}  // namespace gftp::net
