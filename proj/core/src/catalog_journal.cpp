#include <fcntl.h>
#include <unistd.h>

#include <boost/crc.hpp>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gftp/catalog.hpp"
#include "gftp/errors.hpp"

namespace gftp::catalog {

namespace {

std::string crc_hex(std::string_view text) {
  boost::crc_32_type crc;
  crc.process_bytes(text.data(), text.size());
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", crc.checksum());
  return buf;
}

void write_fully(int fd, std::string_view data, const std::string& what) {
  while (!data.empty()) {
    const auto n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      fail(Errc::IoError, what + ": " + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

void sync_fd(int fd, const std::string& what) {
  if (::fdatasync(fd) != 0) fail(Errc::IoError, what + ": " + std::strerror(errno));
}

void sync_dir(const std::filesystem::path& dir) {
  const int fd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY);
  if (fd < 0) return;
  ::fsync(fd);
  ::close(fd);
}

// Writes path atomically: temp file, fsync, rename, fsync directory.
void replace_file(const std::filesystem::path& path, std::string_view contents) {
  const auto tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) fail(Errc::IoError, "create " + tmp + ": " + std::strerror(errno));
  try {
    write_fully(fd, contents, tmp);
    sync_fd(fd, tmp);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  std::filesystem::rename(tmp, path);
  sync_dir(path.parent_path());
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Store::Store(std::filesystem::path dir, SyncMode sync, std::uint64_t snapshot_every)
    : dir_(std::move(dir)),
      journal_path_(dir_ / "journal.log"),
      snapshot_path_(dir_ / "snapshot.json"),
      sync_(sync),
      snapshot_every_(snapshot_every) {
  std::filesystem::create_directories(dir_);
  load();
}

Store::~Store() {
  if (journal_fd_ >= 0) ::close(journal_fd_);
}

void Store::load() {
  std::uint64_t snap_seq = 0;
  if (std::filesystem::exists(snapshot_path_)) {
    const auto text = read_all(snapshot_path_);
    const auto nl = text.find('\n');
    if (nl == std::string::npos || std::string_view(text).substr(0, nl) != kSnapshotHeader) {
      fail(Errc::CorruptJournal, "bad snapshot header in " + snapshot_path_.string());
    }
    try {
      const auto j = json::parse(text.substr(nl + 1));
      snap_seq = j.at("seq").get<std::uint64_t>();
      catalog_ = Catalog::from_json(j.at("catalog"));
    } catch (const json::exception& e) {
      fail(Errc::CorruptJournal, std::string("snapshot: ") + e.what());
    }
  }
  seq_ = snap_seq;

  std::uint64_t good_end = 0;
  bool have_header = false;
  if (std::filesystem::exists(journal_path_)) {
    const auto text = read_all(journal_path_);
    const auto header_end = text.find('\n');
    if (header_end != std::string::npos && std::string_view(text).substr(0, header_end) == kJournalHeader) {
      have_header = true;
      good_end = header_end + 1;
      std::size_t pos = good_end;
      while (pos < text.size()) {
        const auto end = text.find('\n', pos);
        if (end == std::string::npos) break;  // torn final write
        const std::string_view line(text.data() + pos, end - pos);
        if (line.size() < 10 || line[8] != ' ') break;
        const auto body = line.substr(9);
        if (crc_hex(body) != line.substr(0, 8)) break;
        json record;
        try {
          record = json::parse(body);
        } catch (const json::exception&) {
          break;
        }
        const auto seq = record.value("seq", std::uint64_t{0});
        if (seq > seq_) {
          if (seq != seq_ + 1) break;
          try {
            catalog_.apply(record);
          } catch (const Error&) {
            break;
          }
          seq_ = seq;
          ++replayed_;
        }
        pos = end + 1;
        good_end = pos;
      }
    }
  }
  if (have_header) {
    // Cut any damaged tail so new records follow the last good one.
    std::filesystem::resize_file(journal_path_, good_end);
    open_journal(false);
  } else {
    open_journal(true);
  }
  since_snapshot_ = replayed_;
}

void Store::open_journal(bool truncate) {
  if (journal_fd_ >= 0) ::close(journal_fd_);
  if (truncate) replace_file(journal_path_, std::string(kJournalHeader) + "\n");
  journal_fd_ = ::open(journal_path_.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
  if (journal_fd_ < 0) fail(Errc::IoError, "open " + journal_path_.string() + ": " + std::strerror(errno));
}

void Store::append(const json& request) {
  const auto body = request.dump();
  std::string line = crc_hex(body);
  line += ' ';
  line += body;
  line += '\n';
  write_fully(journal_fd_, line, journal_path_.string());
  if (sync_ == SyncMode::Always) sync_fd(journal_fd_, journal_path_.string());
}

json Store::execute(const json& request) {
  const auto op = request.value("op", std::string{});
  if (!Catalog::is_mutation(op)) {
    std::shared_lock lock(mu_);
    // Reads do not touch state; apply() is only non-const for mutations.
    return const_cast<Catalog&>(catalog_).apply(request);
  }
  std::unique_lock lock(mu_);
  if (failed_) fail(Errc::CatalogUnavailable, "journal write failed earlier; restart the service");
  auto result = catalog_.apply(request);
  json record = {{"seq", seq_ + 1}, {"op", op}, {"args", request.value("args", json::object())}};
  try {
    append(record);
  } catch (const Error&) {
    // Memory is now ahead of the journal; refuse further writes.
    failed_ = true;
    throw;
  }
  ++seq_;
  if (++since_snapshot_ >= snapshot_every_) {
    lock.unlock();
    snapshot();
  }
  return result;
}

void Store::snapshot() {
  std::unique_lock lock(mu_);
  const json j = {{"seq", seq_}, {"catalog", catalog_.to_json()}};
  replace_file(snapshot_path_, std::string(kSnapshotHeader) + "\n" + j.dump() + "\n");
  open_journal(true);
  since_snapshot_ = 0;
}

Catalog Store::copy() const {
  std::shared_lock lock(mu_);
  return catalog_;
}

std::uint64_t Store::sequence() const {
  std::shared_lock lock(mu_);
  return seq_;
}

}  // namespace gftp::catalog
