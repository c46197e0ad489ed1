#pragma once

// Control-channel grammar and extended-block data-channel framing. Pure
// functions only; nothing in this header touches a socket.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gftp/range_set.hpp"

namespace gftp::wire {

inline constexpr std::size_t kMaxLineLength = 8 * 1024;
inline constexpr std::uint16_t kDefaultControlPort = 2811;

inline constexpr std::size_t kBlockHeaderSize = 17;
inline constexpr std::size_t kMinBlockSize = 4 * 1024;
inline constexpr std::size_t kDefaultBlockSize = 64 * 1024;
inline constexpr std::size_t kMaxBlockSize = 4 * 1024 * 1024;

// ---- commands ----

struct Command {
  std::string verb;
  std::vector<std::string> args;
  std::string raw;  // the line as received, CRLF stripped

  // raw is provenance only and does not take part in equality.
  friend bool operator==(const Command& a, const Command& b) {
    return a.verb == b.verb && a.args == b.args;
  }
};

const std::vector<std::string_view>& supported_verbs();
bool is_supported_verb(std::string_view verb);

// Accepts a line with or without its trailing CRLF. Unknown verbs parse;
// the server rejects them. Throws Error(MalformedLine).
Command parse_command(std::string_view line);
// Renders "VERB arg arg...\r\n".
std::string render_command(const Command& cmd);
Command make_command(std::string verb, std::vector<std::string> args = {});

// ---- replies ----

class Reply {
 public:
  // Throws Error(MalformedReply) if code is outside 100..699, lines is empty,
  // or a line contains CR or LF.
  Reply(int code, std::vector<std::string> lines);
  Reply(int code, std::string line);

  int code() const noexcept { return code_; }
  const std::vector<std::string>& lines() const noexcept { return lines_; }
  std::string text() const;  // lines joined by '\n'

  bool preliminary() const noexcept { return code_ < 200; }
  bool positive() const noexcept { return code_ >= 200 && code_ < 400; }

  friend bool operator==(const Reply&, const Reply&) = default;

 private:
  int code_;
  std::vector<std::string> lines_;
};

std::string render_reply(const Reply& reply);

// Incremental reply reader for the client side of a control connection.
// feed() takes one line (CRLF stripped) and returns a Reply once the final
// line of a single- or multi-line reply arrives.
class ReplyParser {
 public:
  std::optional<Reply> feed(std::string_view line);
  bool idle() const noexcept { return code_ == 0; }

 private:
  int code_ = 0;
  std::vector<std::string> lines_;
};

// Parses one complete rendered reply (possibly multi-line).
Reply parse_reply(std::string_view text);

// ---- extended blocks ----

namespace descriptor {
inline constexpr std::uint8_t kClose = 0x04;
inline constexpr std::uint8_t kEod = 0x08;
inline constexpr std::uint8_t kMarker = 0x20;
inline constexpr std::uint8_t kEof = 0x40;
}  // namespace descriptor

struct BlockHeader {
  std::uint8_t descriptor = 0;
  std::uint64_t count = 0;
  std::uint64_t offset = 0;  // EOF blocks: number of EODs the receiver must see

  bool has(std::uint8_t flag) const noexcept { return (descriptor & flag) != 0; }
  bool is_data() const noexcept {
    return !has(descriptor::kEod) && !has(descriptor::kEof) && !has(descriptor::kMarker);
  }

  friend bool operator==(const BlockHeader&, const BlockHeader&) = default;
};

void encode_header(const BlockHeader& header, std::span<std::byte, kBlockHeaderSize> out);
BlockHeader decode_header(std::span<const std::byte, kBlockHeaderSize> in);

// Header followed by payload. Throws Error(LengthMismatch) if the payload
// size differs from header.count, or an EOD/MARKER block carries payload.
std::vector<std::byte> encode_block(const BlockHeader& header, std::span<const std::byte> payload);

// Pull-style byte stream; read() returns 0 only at end of stream.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual std::size_t read(std::span<std::byte> out) = 0;
};

class SpanSource final : public ByteSource {
 public:
  explicit SpanSource(std::span<const std::byte> data) : data_(data) {}
  std::size_t read(std::span<std::byte> out) override;
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

struct Block {
  BlockHeader header;
  std::vector<std::byte> payload;
};

// Returns nullopt on a clean end of stream at a block boundary. Consumes
// exactly 17 + count bytes otherwise. Throws Error(TruncatedBlock) or
// Error(OversizeBlock).
std::optional<Block> decode_block(ByteSource& in, std::size_t max_block = kDefaultBlockSize);

// ---- endpoints ----

struct DataEndpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const;  // "host:port", IPv6 hosts bracketed
  friend bool operator==(const DataEndpoint&, const DataEndpoint&) = default;
  friend auto operator<=>(const DataEndpoint&, const DataEndpoint&) = default;
};

// "h1,h2,h3,h4,p1,p2". IPv4 only. Throws Error(MalformedEndpoint).
std::string render_host_port(const DataEndpoint& ep);
DataEndpoint parse_host_port(std::string_view text);
// "host:port" or "[v6]:port".
DataEndpoint parse_endpoint(std::string_view text);

Reply render_pasv_reply(const DataEndpoint& ep);
DataEndpoint parse_pasv_reply(const Reply& reply);

// One endpoint per line, line order = stripe index. An empty list renders
// as a 501 error reply.
Reply render_spas_reply(const std::vector<DataEndpoint>& endpoints);
std::vector<DataEndpoint> parse_spas_reply(const Reply& reply);

// ---- restart markers ----

// "Range Marker a-b,c-d". Throws Error(MalformedMarker).
RangeSet parse_range_marker(std::string_view text);
std::string render_range_marker(const RangeSet& set);
// Compact "a-b,c-d" list shared by markers and REST.
RangeSet parse_range_list(std::string_view text);
std::string render_range_list(const RangeSet& set);

// ---- small grammar helpers ----

// Strict unsigned decimal. Returns nullopt on anything else.
std::optional<std::uint64_t> parse_u64(std::string_view text);
std::vector<std::string_view> split(std::string_view text, char sep);

}  // namespace gftp::wire
