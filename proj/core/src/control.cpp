#include "gftp/control.hpp"

#include "gftp/crypto.hpp"
#include "gftp/errors.hpp"

namespace gftp {

std::vector<std::byte> derive_session_key(std::span<const std::byte> secret, std::span<const std::byte> nonce) {
  std::vector<std::byte> msg(nonce.begin(), nonce.end());
  const auto tag = crypto::as_bytes("session");
  msg.insert(msg.end(), tag.begin(), tag.end());
  const auto mac = crypto::hmac_sha256(secret, msg);
  return {mac.begin(), mac.end()};
}

ControlChannel::ControlChannel(net::Socket socket, wire::DataEndpoint server)
    : socket_(std::move(socket)), reader_(socket_, net::Millis{300000}), server_(std::move(server)) {}

std::unique_ptr<ControlChannel> ControlChannel::connect(const wire::DataEndpoint& server, net::Millis timeout) {
  auto ch = std::make_unique<ControlChannel>(net::Socket::connect(server, timeout), server);
  const auto greeting = ch->read_reply();
  if (greeting.code() != 220) {
    fail(Errc::ProtocolError, "unexpected greeting " + std::to_string(greeting.code()) + " " + greeting.text());
  }
  return ch;
}

void ControlChannel::send(const wire::Command& cmd) {
  const auto line = wire::render_command(cmd);
  socket_.write_all(line);
  bytes_sent_ += line.size();
}

wire::Reply ControlChannel::read_reply() {
  wire::ReplyParser parser;
  while (true) {
    auto line = reader_.read_line();
    if (!line) fail(Errc::IoError, "control connection closed by " + server_.to_string());
    bytes_received_ += line->size() + 2;
    if (auto reply = parser.feed(*line)) return *reply;
  }
}

wire::Reply ControlChannel::command(const wire::Command& cmd) {
  send(cmd);
  return read_reply();
}

wire::Reply ControlChannel::command(std::string verb, std::vector<std::string> args) {
  return command(wire::make_command(std::move(verb), std::move(args)));
}

wire::Reply ControlChannel::await_final(const ReplyHook& on_preliminary) {
  while (true) {
    auto reply = read_reply();
    if (!reply.preliminary()) return reply;
    if (on_preliminary) on_preliminary(reply);
  }
}

void ControlChannel::authenticate(const std::string& user, std::span<const std::byte> secret) {
  auto r = command("USER", {user});
  if (r.code() != 331 && r.code() != 230) fail(Errc::AuthFailed, "USER rejected: " + r.text());
  r = command("AUTH", {"HMAC"});
  const auto text = r.lines().front();
  const auto eq = text.find("ADAT=");
  if (r.code() != 334 || eq == std::string::npos) fail(Errc::AuthFailed, "AUTH rejected: " + r.text());
  bool ok = false;
  const auto nonce = crypto::base64_decode(std::string_view(text).substr(eq + 5), &ok);
  if (!ok || nonce.empty()) fail(Errc::AuthFailed, "bad challenge");
  const auto mac = crypto::hmac_sha256(secret, nonce);
  r = command("ADAT", {crypto::base64_encode(mac)});
  if (r.code() != 235) fail(Errc::AuthFailed, "ADAT rejected: " + r.text());
  session_key_ = derive_session_key(secret, nonce);
  identity_ = user;
}

}  // namespace gftp
