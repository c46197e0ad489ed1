#include "gftp/net.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <csignal>
#include <cstring>

#include "gftp/errors.hpp"

namespace gftp::net {

namespace {

std::string errno_text() { return std::strerror(errno); }

union SockAddr {
  sockaddr base;
  sockaddr_in v4;
  sockaddr_in6 v6;
  sockaddr_storage storage;
};

socklen_t make_addr(const std::string& host, std::uint16_t port, SockAddr& addr) {
  std::memset(&addr, 0, sizeof(addr));
  if (inet_pton(AF_INET, host.c_str(), &addr.v4.sin_addr) == 1) {
    addr.v4.sin_family = AF_INET;
    addr.v4.sin_port = htons(port);
    return sizeof(sockaddr_in);
  }
  if (inet_pton(AF_INET6, host.c_str(), &addr.v6.sin6_addr) == 1) {
    addr.v6.sin6_family = AF_INET6;
    addr.v6.sin6_port = htons(port);
    return sizeof(sockaddr_in6);
  }
  return 0;
}

wire::DataEndpoint to_endpoint(const SockAddr& addr) {
  char buf[INET6_ADDRSTRLEN] = {};
  if (addr.base.sa_family == AF_INET6) {
    inet_ntop(AF_INET6, &addr.v6.sin6_addr, buf, sizeof(buf));
    return {buf, ntohs(addr.v6.sin6_port)};
  }
  inet_ntop(AF_INET, &addr.v4.sin_addr, buf, sizeof(buf));
  return {buf, ntohs(addr.v4.sin_port)};
}

void apply_buffer(int fd, std::size_t bytes) {
  if (bytes == 0) return;
  const int v = static_cast<int>(bytes);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &v, sizeof(v));
  ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &v, sizeof(v));
}

// Waits for `events`; returns false on timeout.
bool wait_for(int fd, short events, Millis timeout) {
  pollfd p{fd, events, 0};
  while (true) {
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) fail(Errc::IoError, "poll: " + errno_text());
  }
}

}  // namespace

void ignore_sigpipe() { std::signal(SIGPIPE, SIG_IGN); }

std::string resolve_host(const std::string& host) {
  SockAddr probe{};
  if (make_addr(host, 1, probe) != 0) return host;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    fail(Errc::ConnectFailure, "cannot resolve " + host);
  }
  SockAddr addr{};
  std::memcpy(&addr, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  return to_endpoint(addr).host;
}

// ---- Socket ----

Socket::~Socket() { close(); }

Socket::Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Socket& Socket::operator=(Socket&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

Socket Socket::connect(const wire::DataEndpoint& ep, Millis timeout, std::size_t buffer_size) {
  SockAddr addr{};
  const auto host = resolve_host(ep.host);
  const auto len = make_addr(host, ep.port, addr);
  if (len == 0) fail(Errc::ConnectFailure, "bad address " + ep.host);
  Socket s(::socket(addr.base.sa_family, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) fail(Errc::ConnectFailure, "socket: " + errno_text());
  apply_buffer(s.fd_, buffer_size);

  const int flags = ::fcntl(s.fd_, F_GETFL);
  ::fcntl(s.fd_, F_SETFL, flags | O_NONBLOCK);
  if (::connect(s.fd_, &addr.base, len) != 0) {
    if (errno != EINPROGRESS) fail(Errc::ConnectFailure, ep.to_string() + ": " + errno_text());
    if (!wait_for(s.fd_, POLLOUT, timeout)) fail(Errc::ConnectFailure, ep.to_string() + ": timed out");
    int err = 0;
    socklen_t elen = sizeof(err);
    ::getsockopt(s.fd_, SOL_SOCKET, SO_ERROR, &err, &elen);
    if (err != 0) fail(Errc::ConnectFailure, ep.to_string() + ": " + std::strerror(err));
  }
  ::fcntl(s.fd_, F_SETFL, flags);
  s.set_nodelay();
  return s;
}

void Socket::write_all(std::span<const std::byte> data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const auto n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) fail(Errc::Timeout, "send timed out");
      fail(Errc::IoError, "send: " + errno_text());
    }
    sent += static_cast<std::size_t>(n);
  }
}

void Socket::write_all(std::string_view data) {
  write_all(std::span(reinterpret_cast<const std::byte*>(data.data()), data.size()));
}

std::size_t Socket::read_some(std::span<std::byte> out, Millis timeout) {
  if (out.empty()) return 0;
  while (true) {
    if (timeout.count() >= 0 && !wait_for(fd_, POLLIN, timeout)) fail(Errc::Timeout, "read timed out");
    const auto n = ::recv(fd_, out.data(), out.size(), 0);
    if (n >= 0) return static_cast<std::size_t>(n);
    if (errno == EINTR) continue;
    if (errno == EAGAIN || errno == EWOULDBLOCK) fail(Errc::Timeout, "read timed out");
    fail(Errc::IoError, "recv: " + errno_text());
  }
}

void Socket::shutdown() const noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::shutdown_write() const noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
}

void Socket::close() noexcept {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::set_buffer_size(std::size_t bytes) { apply_buffer(fd_, bytes); }

void Socket::set_send_timeout(Millis timeout) {
  timeval tv{};
  tv.tv_sec = timeout.count() / 1000;
  tv.tv_usec = (timeout.count() % 1000) * 1000;
  ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
}

void Socket::set_nodelay() {
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

wire::DataEndpoint Socket::local_endpoint() const {
  SockAddr addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, &addr.base, &len);
  return to_endpoint(addr);
}

wire::DataEndpoint Socket::peer_endpoint() const {
  SockAddr addr{};
  socklen_t len = sizeof(addr);
  ::getpeername(fd_, &addr.base, &len);
  return to_endpoint(addr);
}

bool Socket::peer_closed() const {
  if (fd_ < 0) return true;
  pollfd p{fd_, POLLIN, 0};
  if (::poll(&p, 1, 0) <= 0) return false;
  if (p.revents & (POLLERR | POLLHUP | POLLNVAL)) return true;
  char c;
  const auto n = ::recv(fd_, &c, 1, MSG_PEEK | MSG_DONTWAIT);
  return n == 0 || (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK);
}

// ---- Listener ----

Listener::~Listener() { close(); }

Listener::Listener(Listener&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Listener& Listener::operator=(Listener&& other) noexcept {
  if (this != &other) {
    close();
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

Listener Listener::bind(const std::string& host, std::uint16_t port, std::size_t buffer_size) {
  SockAddr addr{};
  const auto len = make_addr(resolve_host(host), port, addr);
  if (len == 0) fail(Errc::BindFailure, "bad address " + host);
  const int fd = ::socket(addr.base.sa_family, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd < 0) fail(Errc::BindFailure, "socket: " + errno_text());
  Listener l(fd);
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  apply_buffer(fd, buffer_size);
  if (::bind(fd, &addr.base, len) != 0) {
    fail(Errc::BindFailure, host + ":" + std::to_string(port) + ": " + errno_text());
  }
  if (::listen(fd, 128) != 0) fail(Errc::BindFailure, "listen: " + errno_text());
  return l;
}

Listener Listener::bind_in_range(const std::string& host, std::uint16_t low, std::uint16_t high,
                                 std::size_t buffer_size) {
  for (std::uint32_t p = low; p <= high; ++p) {
    try {
      return bind(host, static_cast<std::uint16_t>(p), buffer_size);
    } catch (const Error&) {
    }
  }
  fail(Errc::BindFailure, "port range " + std::to_string(low) + "-" + std::to_string(high) + " exhausted");
}

std::optional<Socket> Listener::accept(Millis timeout) {
  while (fd_ >= 0) {
    pollfd p{fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc == 0) return std::nullopt;
    if (rc < 0) {
      if (errno == EINTR) continue;
      return std::nullopt;
    }
    if (p.revents & (POLLHUP | POLLERR | POLLNVAL)) return std::nullopt;
    const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      Socket s(fd);
      s.set_nodelay();
      return s;
    }
    if (errno == EINTR || errno == ECONNABORTED || errno == EAGAIN) continue;
    return std::nullopt;
  }
  return std::nullopt;
}

wire::DataEndpoint Listener::endpoint() const {
  SockAddr addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, &addr.base, &len);
  return to_endpoint(addr);
}

void Listener::shutdown() const noexcept {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Listener::close() noexcept {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

// ---- BufferedReader ----

bool BufferedReader::fill() {
  if (pos_ > 0) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(pos_));
    pos_ = 0;
  }
  const auto old = buffer_.size();
  buffer_.resize(old + 64 * 1024);
  std::size_t n = 0;
  try {
    n = socket_->read_some(std::span(buffer_).subspan(old), timeout_);
  } catch (...) {
    buffer_.resize(old);
    throw;
  }
  buffer_.resize(old + n);
  return n > 0;
}

std::optional<std::string> BufferedReader::read_line(std::size_t max_length) {
  std::size_t scanned = pos_;
  while (true) {
    for (; scanned < buffer_.size(); ++scanned) {
      if (buffer_[scanned] == std::byte{'\n'}) {
        std::string line(reinterpret_cast<const char*>(buffer_.data() + pos_), scanned - pos_);
        pos_ = scanned + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
    }
    if (buffer_.size() - pos_ > max_length) fail(Errc::MalformedLine, "line exceeds limit");
    const auto checked = scanned - pos_;  // fill() may move pos_ back to zero
    const bool more = fill();
    scanned = pos_ + checked;
    if (!more) {
      if (buffered() > 0) {
        std::string line(reinterpret_cast<const char*>(buffer_.data() + pos_), buffered());
        pos_ = buffer_.size();
        return line;
      }
      return std::nullopt;
    }
  }
}

std::size_t BufferedReader::read(std::span<std::byte> out) {
  if (buffered() == 0) {
    // Large reads bypass the buffer.
    if (out.size() >= 64 * 1024) return socket_->read_some(out, timeout_);
    if (!fill()) return 0;
  }
  const auto n = std::min(out.size(), buffered());
  std::memcpy(out.data(), buffer_.data() + pos_, n);
  pos_ += n;
  return n;
}

}  // namespace gftp::net
