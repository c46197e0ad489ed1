#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gftp::crypto {

using Digest = std::array<std::byte, 32>;

Digest sha256(std::span<const std::byte> data);
Digest sha256(std::string_view data);
Digest hmac_sha256(std::span<const std::byte> key, std::span<const std::byte> data);

// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(Sha256&&) noexcept;
  Sha256& operator=(Sha256&&) noexcept;

  void update(std::span<const std::byte> data);
  Digest finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// SHA-256 of bytes [offset, offset+length) of a file. length = UINT64_MAX
// means to end of file.
Digest file_sha256(const std::string& path, std::uint64_t offset = 0, std::uint64_t length = UINT64_MAX);

std::vector<std::byte> random_bytes(std::size_t n);

std::string to_hex(std::span<const std::byte> data);
// Returns empty on malformed input (odd length or non-hex digit).
std::vector<std::byte> from_hex(std::string_view hex, bool* ok = nullptr);

std::string base64_encode(std::span<const std::byte> data);
std::vector<std::byte> base64_decode(std::string_view text, bool* ok = nullptr);

std::span<const std::byte> as_bytes(std::string_view s);
bool constant_time_equal(std::span<const std::byte> a, std::span<const std::byte> b);

}  // namespace gftp::crypto
