#pragma once

// Helpers shared by the command-line tools.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <string>

#include "gftp/client.hpp"
#include "gftp/errors.hpp"
#include "gftp/wire.hpp"

namespace tools {

enum Exit : int { kOk = 0, kFailure = 1, kAuth = 2, kNotFound = 3, kInterrupted = 4, kVerify = 5 };

inline int exit_code(gftp::Errc code) {
  using gftp::Errc;
  switch (code) {
    case Errc::AuthFailed: return kAuth;
    case Errc::RemoteMissing:
    case Errc::NotFound:
    case Errc::MissingOnStorage:
    case Errc::NotAtSource:
    case Errc::SourceUnreadable:
    case Errc::NotRegisteredHere: return kNotFound;
    case Errc::Interrupted:
    case Errc::TransferFailed:
    case Errc::AllChannelsFailed:
    case Errc::ChannelFailure:
    case Errc::ConnectFailure:
    case Errc::Timeout:
    case Errc::Cancelled:
    case Errc::CatalogUnavailable: return kInterrupted;
    case Errc::VerifyMismatch: return kVerify;
    default: return kFailure;
  }
}

inline int report(const char* tool, const gftp::Error& e) {
  std::cerr << tool << ": " << e.what() << "\n";
  return exit_code(e.code());
}

inline std::string default_credentials_path() {
  if (const char* p = std::getenv("GFTP_CREDENTIALS")) return p;
  if (const char* home = std::getenv("HOME")) return std::string(home) + "/.gftp/credentials";
  return ".gftp-credentials";
}

inline std::string default_catalog_server() {
  if (const char* p = std::getenv("RCAT_SERVER")) return p;
  return "127.0.0.1:39281";
}

// Blocks SIGINT/SIGTERM in every thread started afterwards; wait_for_signal()
// then returns when one arrives.
inline sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

inline int wait_for_signal(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
  return sig;
}

}  // namespace tools
