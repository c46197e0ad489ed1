#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace gftp {

// Error codes shared by every module. The catalog wire API reports these by
// name, so names are part of the external interface.
enum class Errc {
  // wire
  MalformedLine,
  LengthMismatch,
  TruncatedBlock,
  OversizeBlock,
  EmptyInterval,
  MalformedMarker,
  MalformedEndpoint,
  MalformedReply,
  // dataplane
  ChannelFailure,
  AllChannelsFailed,
  OutOfRangeBlock,
  DataConflict,
  MarkerOutsideTarget,
  DcauMismatch,
  InvalidSpec,
  // network / io
  BindFailure,
  ConnectFailure,
  UpstreamUnreachable,
  Timeout,
  IoError,
  Cancelled,
  // client
  AuthFailed,
  RemoteMissing,
  RangeError,
  Interrupted,
  StaleRestart,
  SameEndpoint,
  VerifyMismatch,
  ProtocolError,
  // catalog
  Duplicate,
  NotFound,
  HasLocations,
  DuplicateStorage,
  SubsetViolation,
  NotRegisteredHere,
  InvalidName,
  Busy,
  CorruptJournal,
  BadRequest,
  // replica
  MissingOnStorage,
  CatalogUnavailable,
  NotAtSource,
  TransferFailed,
  PublishConflict,
  SourceUnreadable,
  InjectedCrash,
};

std::string_view errc_name(Errc code);
// Inverse of errc_name; unknown names map to ProtocolError.
Errc errc_from_name(std::string_view name);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail);

  Errc code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

[[noreturn]] void fail(Errc code, const std::string& detail = {});

}  // namespace gftp
