#include "gftp/errors.hpp"

#include <array>
#include <utility>

namespace gftp {

namespace {

constexpr std::array kNames = {
    std::pair{Errc::MalformedLine, "MalformedLine"},
    std::pair{Errc::LengthMismatch, "LengthMismatch"},
    std::pair{Errc::TruncatedBlock, "TruncatedBlock"},
    std::pair{Errc::OversizeBlock, "OversizeBlock"},
    std::pair{Errc::EmptyInterval, "EmptyInterval"},
    std::pair{Errc::MalformedMarker, "MalformedMarker"},
    std::pair{Errc::MalformedEndpoint, "MalformedEndpoint"},
    std::pair{Errc::MalformedReply, "MalformedReply"},
    std::pair{Errc::ChannelFailure, "ChannelFailure"},
    std::pair{Errc::AllChannelsFailed, "AllChannelsFailed"},
    std::pair{Errc::OutOfRangeBlock, "OutOfRangeBlock"},
    std::pair{Errc::DataConflict, "DataConflict"},
    std::pair{Errc::MarkerOutsideTarget, "MarkerOutsideTarget"},
    std::pair{Errc::DcauMismatch, "DcauMismatch"},
    std::pair{Errc::InvalidSpec, "InvalidSpec"},
    std::pair{Errc::BindFailure, "BindFailure"},
    std::pair{Errc::ConnectFailure, "ConnectFailure"},
    std::pair{Errc::UpstreamUnreachable, "UpstreamUnreachable"},
    std::pair{Errc::Timeout, "Timeout"},
    std::pair{Errc::IoError, "IoError"},
    std::pair{Errc::Cancelled, "Cancelled"},
    std::pair{Errc::AuthFailed, "AuthFailed"},
    std::pair{Errc::RemoteMissing, "RemoteMissing"},
    std::pair{Errc::RangeError, "RangeError"},
    std::pair{Errc::Interrupted, "Interrupted"},
    std::pair{Errc::StaleRestart, "StaleRestart"},
    std::pair{Errc::SameEndpoint, "SameEndpoint"},
    std::pair{Errc::VerifyMismatch, "VerifyMismatch"},
    std::pair{Errc::ProtocolError, "ProtocolError"},
    std::pair{Errc::Duplicate, "Duplicate"},
    std::pair{Errc::NotFound, "NotFound"},
    std::pair{Errc::HasLocations, "HasLocations"},
    std::pair{Errc::DuplicateStorage, "DuplicateStorage"},
    std::pair{Errc::SubsetViolation, "SubsetViolation"},
    std::pair{Errc::NotRegisteredHere, "NotRegisteredHere"},
    std::pair{Errc::InvalidName, "InvalidName"},
    std::pair{Errc::Busy, "Busy"},
    std::pair{Errc::CorruptJournal, "CorruptJournal"},
    std::pair{Errc::BadRequest, "BadRequest"},
    std::pair{Errc::MissingOnStorage, "MissingOnStorage"},
    std::pair{Errc::CatalogUnavailable, "CatalogUnavailable"},
    std::pair{Errc::NotAtSource, "NotAtSource"},
    std::pair{Errc::TransferFailed, "TransferFailed"},
    std::pair{Errc::PublishConflict, "PublishConflict"},
    std::pair{Errc::SourceUnreadable, "SourceUnreadable"},
    std::pair{Errc::InjectedCrash, "InjectedCrash"},
};

std::string compose(Errc code, const std::string& detail) {
  std::string msg{errc_name(code)};
  if (!detail.empty()) {
    msg += ": ";
    msg += detail;
  }
  return msg;
}

}  // namespace

std::string_view errc_name(Errc code) {
  for (const auto& [c, name] : kNames) {
    if (c == code) return name;
  }
  return "Unknown";
}

Errc errc_from_name(std::string_view name) {
  for (const auto& [c, n] : kNames) {
    if (n == name) return c;
  }
  return Errc::ProtocolError;
}

Error::Error(Errc code, const std::string& detail)
    : std::runtime_error(compose(code, detail)), code_(code), detail_(detail) {}

void fail(Errc code, const std::string& detail) { throw Error(code, detail); }

}  // namespace gftp
