#include "gftp/wire.hpp"

#include <arpa/inet.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstring>

#include "gftp/errors.hpp"

namespace gftp::wire {

namespace {

constexpr std::string_view kMarkerPrefix = "Range Marker";

// Verbs whose final argument is a path that runs to end of line, paired
// with the number of whitespace-separated tokens that precede the path.
struct PathVerb {
  std::string_view verb;
  std::size_t fixed;
};
constexpr std::array kPathVerbs = {
    PathVerb{"RETR", 0}, PathVerb{"STOR", 0}, PathVerb{"SIZE", 0},
    PathVerb{"ERET", 3}, PathVerb{"ESTO", 2}, PathVerb{"CKSM", 3},
};

bool is_control(unsigned char c) { return c < 0x20 || c == 0x7f; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  return s;
}

std::string_view strip_crlf(std::string_view line) {
  if (line.size() >= 2 && line.substr(line.size() - 2) == "\r\n") line.remove_suffix(2);
  return line;
}

void put_be64(std::byte* out, std::uint64_t v) {
  for (int i = 7; i >= 0; --i) {
    out[i] = static_cast<std::byte>(v & 0xff);
    v >>= 8;
  }
}

std::uint64_t get_be64(const std::byte* in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v = (v << 8) | std::to_integer<std::uint64_t>(in[i]);
  return v;
}

// Reads until out is full or the stream ends; returns bytes read.
std::size_t read_full(ByteSource& in, std::span<std::byte> out) {
  std::size_t got = 0;
  while (got < out.size()) {
    const auto n = in.read(out.subspan(got));
    if (n == 0) break;
    got += n;
  }
  return got;
}

std::optional<int> parse_code(std::string_view line) {
  if (line.size() < 3) return std::nullopt;
  for (int i = 0; i < 3; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(line[i]))) return std::nullopt;
  }
  return (line[0] - '0') * 100 + (line[1] - '0') * 10 + (line[2] - '0');
}

}  // namespace

// ---- helpers ----

std::optional<std::uint64_t> parse_u64(std::string_view text) {
  if (text.empty() || text.size() > 20) return std::nullopt;
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc{} || ptr != end) return std::nullopt;
  return v;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = text.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(text.substr(pos));
      return out;
    }
    out.push_back(text.substr(pos, next - pos));
    pos = next + 1;
  }
}

// ---- commands ----

const std::vector<std::string_view>& supported_verbs() {
  static const std::vector<std::string_view> verbs = {
      "USER", "AUTH", "ADAT", "PASV", "PORT", "SPAS", "SPOR", "RETR", "STOR", "ERET",
      "ESTO", "REST", "SBUF", "OPTS", "SIZE", "CKSM", "ABOR", "NOOP", "QUIT",
  };
  return verbs;
}

bool is_supported_verb(std::string_view verb) {
  const auto& v = supported_verbs();
  return std::find(v.begin(), v.end(), verb) != v.end();
}

Command parse_command(std::string_view line) {
  if (line.size() > kMaxLineLength) fail(Errc::MalformedLine, "line exceeds 8 KiB");
  Command cmd;
  line = strip_crlf(line);
  for (unsigned char c : line) {
    if (is_control(c)) fail(Errc::MalformedLine, "control character in command");
  }
  cmd.raw = std::string(line);

  std::size_t pos = 0;
  while (pos < line.size() && line[pos] != ' ') {
    const auto c = static_cast<unsigned char>(line[pos]);
    if (!std::isalpha(c)) fail(Errc::MalformedLine, "verb must be alphabetic");
    cmd.verb.push_back(static_cast<char>(std::toupper(c)));
    ++pos;
  }
  if (cmd.verb.empty()) fail(Errc::MalformedLine, "no verb");

  std::string_view rest = line.substr(pos);
  const auto path_verb = std::find_if(kPathVerbs.begin(), kPathVerbs.end(),
                                      [&](const PathVerb& p) { return p.verb == cmd.verb; });
  if (path_verb == kPathVerbs.end()) {
    for (auto tok : split(rest, ' ')) {
      if (!tok.empty()) cmd.args.emplace_back(tok);
    }
    return cmd;
  }

  // Fixed tokens, then one separator, then the path verbatim.
  for (std::size_t i = 0; i < path_verb->fixed; ++i) {
    while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
    if (rest.empty()) return cmd;
    const auto end = rest.find(' ');
    cmd.args.emplace_back(rest.substr(0, end));
    rest = end == std::string_view::npos ? std::string_view{} : rest.substr(end);
  }
  if (!rest.empty()) {
    rest.remove_prefix(1);  // the single separating space
    if (!rest.empty()) cmd.args.emplace_back(rest);
  }
  return cmd;
}

std::string render_command(const Command& cmd) {
  std::string out = cmd.verb;
  for (const auto& a : cmd.args) {
    out += ' ';
    out += a;
  }
  out += "\r\n";
  return out;
}

Command make_command(std::string verb, std::vector<std::string> args) {
  Command cmd{std::move(verb), std::move(args), {}};
  cmd.raw = render_command(cmd);
  cmd.raw.resize(cmd.raw.size() - 2);
  return cmd;
}

// ---- replies ----

Reply::Reply(int code, std::vector<std::string> lines) : code_(code), lines_(std::move(lines)) {
  if (code_ < 100 || code_ > 699) fail(Errc::MalformedReply, "code out of range");
  if (lines_.empty()) fail(Errc::MalformedReply, "reply needs at least one line");
  for (const auto& l : lines_) {
    if (l.find_first_of("\r\n") != std::string::npos) fail(Errc::MalformedReply, "CR/LF in reply text");
  }
}

Reply::Reply(int code, std::string line) : Reply(code, std::vector<std::string>{std::move(line)}) {}

std::string Reply::text() const {
  std::string out;
  for (std::size_t i = 0; i < lines_.size(); ++i) {
    if (i) out += '\n';
    out += lines_[i];
  }
  return out;
}

std::string render_reply(const Reply& reply) {
  const auto code = std::to_string(reply.code());
  std::string out;
  const auto& lines = reply.lines();
  for (std::size_t i = 0; i < lines.size(); ++i) {
    out += code;
    out += i + 1 < lines.size() ? '-' : ' ';
    out += lines[i];
    out += "\r\n";
  }
  return out;
}

std::optional<Reply> ReplyParser::feed(std::string_view line) {
  line = strip_crlf(line);
  if (code_ == 0) {
    const auto code = parse_code(line);
    if (!code || *code < 100 || *code > 699) fail(Errc::MalformedReply, std::string(line));
    if (line.size() > 3 && line[3] == '-') {
      code_ = *code;
      lines_.assign(1, std::string(line.substr(4)));
      return std::nullopt;
    }
    if (line.size() > 3 && line[3] != ' ') fail(Errc::MalformedReply, std::string(line));
    return Reply(*code, std::string(line.size() > 4 ? line.substr(4) : std::string_view{}));
  }
  const auto code = parse_code(line);
  if (code && *code == code_ && (line.size() == 3 || line[3] == ' ')) {
    lines_.emplace_back(line.size() > 4 ? line.substr(4) : std::string_view{});
    Reply done(code_, std::move(lines_));
    code_ = 0;
    lines_.clear();
    return done;
  }
  if (code && *code == code_ && line[3] == '-') {
    lines_.emplace_back(line.substr(4));
  } else {
    lines_.emplace_back(line);
  }
  return std::nullopt;
}

Reply parse_reply(std::string_view text) {
  ReplyParser parser;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find("\r\n", pos);
    if (end == std::string_view::npos) end = text.size();
    if (auto r = parser.feed(text.substr(pos, end - pos))) {
      if (end + 2 < text.size()) fail(Errc::MalformedReply, "trailing data after reply");
      return *r;
    }
    pos = end + 2;
  }
  fail(Errc::MalformedReply, "incomplete reply");
}

// ---- blocks ----

void encode_header(const BlockHeader& header, std::span<std::byte, kBlockHeaderSize> out) {
  out[0] = static_cast<std::byte>(header.descriptor);
  put_be64(out.data() + 1, header.count);
  put_be64(out.data() + 9, header.offset);
}

BlockHeader decode_header(std::span<const std::byte, kBlockHeaderSize> in) {
  return BlockHeader{std::to_integer<std::uint8_t>(in[0]), get_be64(in.data() + 1), get_be64(in.data() + 9)};
}

std::vector<std::byte> encode_block(const BlockHeader& header, std::span<const std::byte> payload) {
  if (payload.size() != header.count) fail(Errc::LengthMismatch, "payload size differs from header count");
  if ((header.has(descriptor::kEod) || header.has(descriptor::kMarker)) && header.count != 0) {
    fail(Errc::LengthMismatch, "EOD and MARKER blocks carry no payload");
  }
  std::vector<std::byte> out(kBlockHeaderSize + payload.size());
  encode_header(header, std::span<std::byte, kBlockHeaderSize>(out.data(), kBlockHeaderSize));
  if (!payload.empty()) std::memcpy(out.data() + kBlockHeaderSize, payload.data(), payload.size());
  return out;
}

std::size_t SpanSource::read(std::span<std::byte> out) {
  const auto n = std::min(out.size(), data_.size() - pos_);
  if (n) std::memcpy(out.data(), data_.data() + pos_, n);
  pos_ += n;
  return n;
}

std::optional<Block> decode_block(ByteSource& in, std::size_t max_block) {
  std::array<std::byte, kBlockHeaderSize> raw{};
  const auto got = read_full(in, raw);
  if (got == 0) return std::nullopt;
  if (got < raw.size()) fail(Errc::TruncatedBlock, "stream ended inside a block header");
  Block block{decode_header(raw), {}};
  if (block.header.count > max_block) {
    fail(Errc::OversizeBlock, "block of " + std::to_string(block.header.count) + " bytes");
  }
  block.payload.resize(block.header.count);
  if (read_full(in, block.payload) < block.payload.size()) {
    fail(Errc::TruncatedBlock, "stream ended inside a block payload");
  }
  return block;
}

// ---- endpoints ----

std::string DataEndpoint::to_string() const {
  if (host.find(':') != std::string::npos) return "[" + host + "]:" + std::to_string(port);
  return host + ":" + std::to_string(port);
}

std::string render_host_port(const DataEndpoint& ep) {
  in_addr addr{};
  if (inet_pton(AF_INET, ep.host.c_str(), &addr) != 1) {
    fail(Errc::MalformedEndpoint, "host-port form needs an IPv4 address: " + ep.host);
  }
  if (ep.port == 0) fail(Errc::MalformedEndpoint, "port 0");
  const auto* b = reinterpret_cast<const unsigned char*>(&addr.s_addr);
  return std::to_string(b[0]) + "," + std::to_string(b[1]) + "," + std::to_string(b[2]) + "," +
         std::to_string(b[3]) + "," + std::to_string(ep.port >> 8) + "," + std::to_string(ep.port & 0xff);
}

DataEndpoint parse_host_port(std::string_view text) {
  const auto parts = split(trim(text), ',');
  if (parts.size() != 6) fail(Errc::MalformedEndpoint, std::string(text));
  std::array<std::uint64_t, 6> v{};
  for (std::size_t i = 0; i < 6; ++i) {
    const auto n = parse_u64(parts[i]);
    if (!n || *n > 255) fail(Errc::MalformedEndpoint, std::string(text));
    v[i] = *n;
  }
  DataEndpoint ep;
  ep.host = std::to_string(v[0]) + "." + std::to_string(v[1]) + "." + std::to_string(v[2]) + "." +
            std::to_string(v[3]);
  ep.port = static_cast<std::uint16_t>(v[4] * 256 + v[5]);
  if (ep.port == 0) fail(Errc::MalformedEndpoint, "port 0");
  return ep;
}

DataEndpoint parse_endpoint(std::string_view text) {
  text = trim(text);
  std::string_view host;
  std::string_view port;
  if (!text.empty() && text.front() == '[') {
    const auto close = text.find(']');
    if (close == std::string_view::npos || close + 1 >= text.size() || text[close + 1] != ':') {
      fail(Errc::MalformedEndpoint, std::string(text));
    }
    host = text.substr(1, close - 1);
    port = text.substr(close + 2);
  } else {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) fail(Errc::MalformedEndpoint, std::string(text));
    host = text.substr(0, colon);
    port = text.substr(colon + 1);
  }
  const auto p = parse_u64(port);
  if (host.empty() || !p || *p == 0 || *p > 65535) fail(Errc::MalformedEndpoint, std::string(text));
  return DataEndpoint{std::string(host), static_cast<std::uint16_t>(*p)};
}

Reply render_pasv_reply(const DataEndpoint& ep) {
  return Reply(227, "Entering Passive Mode (" + render_host_port(ep) + ")");
}

DataEndpoint parse_pasv_reply(const Reply& reply) {
  const auto text = reply.lines().front();
  const auto open = text.find('(');
  const auto close = text.find(')', open == std::string::npos ? 0 : open);
  if (reply.code() != 227 || open == std::string::npos || close == std::string::npos) {
    fail(Errc::MalformedEndpoint, text);
  }
  return parse_host_port(std::string_view(text).substr(open + 1, close - open - 1));
}

Reply render_spas_reply(const std::vector<DataEndpoint>& endpoints) {
  if (endpoints.empty()) return Reply(501, "No stripe endpoints available");
  std::vector<std::string> lines;
  lines.reserve(endpoints.size() + 2);
  lines.emplace_back("Entering Striped Passive Mode");
  for (const auto& ep : endpoints) lines.push_back(" " + render_host_port(ep));
  lines.emplace_back("End");
  return Reply(229, std::move(lines));
}

std::vector<DataEndpoint> parse_spas_reply(const Reply& reply) {
  const auto& lines = reply.lines();
  if (reply.code() != 229 || lines.size() < 3) fail(Errc::MalformedEndpoint, "not a SPAS reply");
  std::vector<DataEndpoint> out;
  for (std::size_t i = 1; i + 1 < lines.size(); ++i) out.push_back(parse_host_port(lines[i]));
  return out;
}

// ---- markers ----

RangeSet parse_range_list(std::string_view text) {
  RangeSet set;
  text = trim(text);
  if (text.empty()) return set;
  for (auto item : split(text, ',')) {
    const auto dash = item.find('-');
    if (dash == std::string_view::npos) fail(Errc::MalformedMarker, std::string(item));
    const auto a = parse_u64(item.substr(0, dash));
    const auto b = parse_u64(item.substr(dash + 1));
    if (!a || !b || *a >= *b) fail(Errc::MalformedMarker, std::string(item));
    set.insert(ByteRange{*a, *b});
  }
  return set;
}

std::string render_range_list(const RangeSet& set) {
  std::string out;
  for (const auto& r : set.intervals()) {
    if (!out.empty()) out += ',';
    out += std::to_string(r.start);
    out += '-';
    out += std::to_string(r.end);
  }
  return out;
}

RangeSet parse_range_marker(std::string_view text) {
  text = trim(text);
  if (text.substr(0, kMarkerPrefix.size()) != kMarkerPrefix) fail(Errc::MalformedMarker, std::string(text));
  auto rest = text.substr(kMarkerPrefix.size());
  if (!rest.empty() && rest.front() != ' ') fail(Errc::MalformedMarker, std::string(text));
  return parse_range_list(rest);
}

std::string render_range_marker(const RangeSet& set) {
  return std::string(kMarkerPrefix) + " " + render_range_list(set);
}

}  // namespace gftp::wire
