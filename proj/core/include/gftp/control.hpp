#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gftp/net.hpp"
#include "gftp/wire.hpp"

namespace gftp {

// Client side of a control connection: sends commands, reads replies and
// performs the AUTH HMAC / ADAT handshake.
class ControlChannel {
 public:
  using ReplyHook = std::function<void(const wire::Reply&)>;

  // Connects and consumes the 220 greeting.
  static std::unique_ptr<ControlChannel> connect(const wire::DataEndpoint& server,
                                                 net::Millis timeout = net::Millis{10000});

  void send(const wire::Command& cmd);
  wire::Reply read_reply();
  // Sends cmd and returns its first reply.
  wire::Reply command(const wire::Command& cmd);
  wire::Reply command(std::string verb, std::vector<std::string> args = {});
  // Reads replies until a non-preliminary one; preliminaries go to the hook.
  wire::Reply await_final(const ReplyHook& on_preliminary = {});

  // USER / AUTH HMAC / ADAT. Throws Error(AuthFailed).
  void authenticate(const std::string& user, std::span<const std::byte> secret);
  const std::vector<std::byte>& session_key() const noexcept { return session_key_; }
  const std::string& identity() const noexcept { return identity_; }

  const wire::DataEndpoint& server() const noexcept { return server_; }
  std::uint64_t bytes_sent() const noexcept { return bytes_sent_; }
  std::uint64_t bytes_received() const noexcept { return bytes_received_; }
  void set_timeout(net::Millis timeout) { reader_.set_timeout(timeout); }
  void shutdown() const noexcept { socket_.shutdown(); }
  // True when the server has hung up; only meaningful between commands.
  bool closed() const { return reader_.buffered() == 0 && socket_.peer_closed(); }

  ControlChannel(net::Socket socket, wire::DataEndpoint server);

 private:
  net::Socket socket_;
  net::BufferedReader reader_;
  wire::DataEndpoint server_;
  std::vector<std::byte> session_key_;
  std::string identity_;
  std::uint64_t bytes_sent_ = 0;
  std::uint64_t bytes_received_ = 0;
};

// HMAC(secret, nonce ‖ "session"): default DCAU token once authenticated.
std::vector<std::byte> derive_session_key(std::span<const std::byte> secret, std::span<const std::byte> nonce);

}  // namespace gftp
