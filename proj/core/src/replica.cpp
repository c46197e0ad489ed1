#include "gftp/replica.hpp"

#include <algorithm>
#include <filesystem>
#include <set>
#include <thread>

#include "gftp/crypto.hpp"
#include "gftp/errors.hpp"

namespace gftp::replica {

namespace {

using Clock = std::chrono::steady_clock;
using catalog::json;

Millis since(Clock::time_point t) { return std::chrono::duration_cast<Millis>(Clock::now() - t); }

// Storage failures become TransferFailed; crashes and catalog outages pass through.
[[noreturn]] void transfer_failed(const Error& e) {
  if (e.code() == Errc::InjectedCrash || e.code() == Errc::CatalogUnavailable) throw e;
  fail(Errc::TransferFailed, e.what());
}

json entry(std::string_view kind, const std::string& collection, const std::string& name) {
  json e = {{"kind", kind}, {"name", name}};
  if (kind == "location") e["collection"] = collection;
  return e;
}

}  // namespace

std::string_view step_name(Step step) {
  switch (step) {
    case Step::DataCopied: return "data-copied";
    case Step::Verified: return "verified";
    case Step::LogicalFileCreated: return "logical-file-created";
    case Step::CollectionUpdated: return "collection-updated";
    case Step::LocationUpdated: return "location-updated";
  }
  return "unknown";
}

// Advisory catalog locks on "collection/filename" names, taken in sorted
// order and released on scope exit.
class ReplicaManager::NameLock {
 public:
  NameLock(catalog::Handle& h, const std::string& collection, std::vector<std::string> names, Millis timeout)
      : h_(h) {
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    const auto deadline = Clock::now() + timeout;
    try {
      for (const auto& n : names) {
        const auto key = collection + "/" + n;
        while (true) {
          try {
            h_.call("lock", {{"name", key}});
            break;
          } catch (const Error& e) {
            if (e.code() != Errc::Busy || Clock::now() >= deadline) throw;
            std::this_thread::sleep_for(Millis{20});
          }
        }
        held_.push_back(key);
      }
    } catch (...) {
      release();
      throw;
    }
  }
  ~NameLock() { release(); }
  NameLock(const NameLock&) = delete;
  NameLock& operator=(const NameLock&) = delete;

 private:
  void release() noexcept {
    for (const auto& key : held_) {
      try {
        h_.call("unlock", {{"name", key}});
      } catch (...) {
      }
    }
    held_.clear();
  }
  catalog::Handle& h_;
  std::vector<std::string> held_;
};

ReplicaManager::ReplicaManager(catalog::Handle& catalog, client::Client& client, ReplicaOptions options)
    : catalog_(catalog), client_(client), options_(std::move(options)) {}

client::GridUrl ReplicaManager::url_at(const catalog::Location& loc, const std::string& filename) const {
  if (loc.protocol != "gftp") fail(Errc::InvalidSpec, "location " + loc.name + " uses protocol " + loc.protocol);
  return client::GridUrl::parse(catalog::join_url(loc, filename));
}

void ReplicaManager::step(Step s) {
  if (options_.fault) options_.fault(s);
}

std::optional<std::uint64_t> ReplicaManager::storage_size(const client::GridUrl& url) {
  try {
    return client_.size(url);
  } catch (const Error& e) {
    if (e.code() == Errc::RemoteMissing) return std::nullopt;
    throw;
  }
}

ManagedOpReport ReplicaManager::register_files(const std::string& collection, const std::string& location,
                                               const std::vector<std::string>& filenames) {
  const auto started = Clock::now();
  ManagedOpReport report;
  report.operation = "register";
  NameLock lock(catalog_, collection, filenames, options_.lock_timeout);
  const auto loc = catalog::get_location(catalog_, collection, location);
  for (const auto& f : filenames) {
    catalog::check_name(f);
    if (!storage_size(url_at(loc, f))) fail(Errc::MissingOnStorage, f + " at " + location);
  }
  report.verified = true;
  catalog_.call("attr_add", {{"entry", entry("collection", collection, collection)},
                             {"attr", catalog::kFilenameAttr},
                             {"values", filenames}});
  report.catalog_updates.push_back("collection " + collection + " += " + std::to_string(filenames.size()));
  step(Step::CollectionUpdated);
  catalog_.call("attr_add", {{"entry", entry("location", collection, location)},
                             {"attr", catalog::kFilenameAttr},
                             {"values", filenames}});
  report.catalog_updates.push_back("location " + location + " += " + std::to_string(filenames.size()));
  step(Step::LocationUpdated);
  report.total_time = since(started);
  return report;
}

ManagedOpReport ReplicaManager::copy_file(const std::string& collection, const std::string& filename,
                                          const std::string& src_location, const std::string& dst_location) {
  const auto started = Clock::now();
  ManagedOpReport report;
  report.operation = "copy";
  NameLock lock(catalog_, collection, {filename}, options_.lock_timeout);
  const auto src = catalog::get_location(catalog_, collection, src_location);
  const auto dst = catalog::get_location(catalog_, collection, dst_location);
  if (!src.filenames.count(filename)) fail(Errc::NotAtSource, filename + " is not at " + src_location);
  if (dst.filenames.count(filename)) {
    report.already_present = true;
    report.verified = true;
    report.total_time = since(started);
    return report;
  }
  const auto src_url = url_at(src, filename);
  const auto dst_url = url_at(dst, filename);

  const auto t0 = Clock::now();
  std::uint64_t size = 0;
  try {
    size = client_.size(src_url);
    auto spec = options_.spec;
    client_.third_party(src_url, dst_url, spec);
  } catch (const Error& e) {
    transfer_failed(e);
  }
  report.transfer_time = since(t0);
  report.bytes_moved = size;
  step(Step::DataCopied);

  try {
    const auto got = storage_size(dst_url);
    if (!got || *got != size) fail(Errc::VerifyMismatch, "destination size differs");
    if (options_.verify_checksum && client_.checksum(src_url, 0, size) != client_.checksum(dst_url, 0, size)) {
      fail(Errc::VerifyMismatch, "destination checksum differs");
    }
  } catch (const Error& e) {
    transfer_failed(e);
  }
  report.verified = true;
  step(Step::Verified);

  catalog_.call("attr_add", {{"entry", entry("location", collection, dst_location)},
                             {"attr", catalog::kFilenameAttr},
                             {"values", {filename}}});
  report.catalog_updates.push_back("location " + dst_location + " += " + filename);
  step(Step::LocationUpdated);
  report.total_time = since(started);
  return report;
}

ManagedOpReport ReplicaManager::publish_file(const std::string& source, const std::string& collection,
                                             const std::string& dst_location, const std::string& logical_name,
                                             std::optional<std::uint64_t> size) {
  const auto started = Clock::now();
  ManagedOpReport report;
  report.operation = "publish";
  catalog::check_name(logical_name);
  NameLock lock(catalog_, collection, {logical_name}, options_.lock_timeout);
  const auto dst = catalog::get_location(catalog_, collection, dst_location);
  const auto col = catalog::list_collection(catalog_, collection);
  const std::string target = collection + "/" + dst_location;

  // An unfinished publish of the same name to the same place may resume.
  std::optional<catalog::LogicalFile> pending;
  try {
    auto lf = catalog::logical_file_from_json(catalog_.call("get_lfile", {{"name", logical_name}}));
    const auto state = lf.attributes.find(std::string(kStateAttr));
    const auto where = lf.attributes.find("target");
    const bool resumable = state != lf.attributes.end() && state->second.count(std::string(kPublishing)) &&
                           where != lf.attributes.end() && where->second.count(target);
    if (!resumable) fail(Errc::PublishConflict, "logical file " + logical_name + " exists");
    pending = std::move(lf);
  } catch (const Error& e) {
    if (e.code() != Errc::NotFound) throw;
  }
  if (!pending && col.filenames.count(logical_name)) {
    fail(Errc::PublishConflict, logical_name + " is already in " + collection);
  }

  const auto dst_url = url_at(dst, logical_name);
  const bool remote = client::is_grid_url(source);
  std::optional<client::GridUrl> src_url;
  std::uint64_t measured = 0;
  try {
    if (remote) {
      src_url = client::GridUrl::parse(source);
      measured = client_.size(*src_url);
    } else {
      measured = std::filesystem::file_size(source);
    }
  } catch (const Error& e) {
    if (e.code() == Errc::RemoteMissing || e.code() == Errc::InvalidSpec) fail(Errc::SourceUnreadable, e.what());
    throw;
  } catch (const std::filesystem::filesystem_error& e) {
    fail(Errc::SourceUnreadable, e.what());
  }
  if (size && *size != measured) {
    fail(Errc::TransferFailed, "source is " + std::to_string(measured) + " bytes, expected " + std::to_string(*size));
  }
  if (pending && pending->size != measured) fail(Errc::PublishConflict, "pending publish has a different size");

  // A pending entry was only created after its data verified; skip the copy
  // if the data is still there.
  const bool copy_needed = !pending || storage_size(dst_url) != measured;
  if (copy_needed) {
    const auto t0 = Clock::now();
    try {
      if (remote) {
        client_.third_party(*src_url, dst_url, options_.spec);
      } else {
        auto spec = options_.spec;
        spec.direction = data::Direction::Put;
        client_.put(source, dst_url, spec);
      }
    } catch (const Error& e) {
      transfer_failed(e);
    }
    report.transfer_time = since(t0);
    report.bytes_moved = measured;
    step(Step::DataCopied);
  }

  try {
    const auto got = storage_size(dst_url);
    if (!got || *got != measured) fail(Errc::VerifyMismatch, "destination size differs");
    if (options_.verify_checksum) {
      const auto want = remote ? client_.checksum(*src_url, 0, measured) : crypto::file_sha256(source);
      if (client_.checksum(dst_url, 0, measured) != want) fail(Errc::VerifyMismatch, "destination checksum differs");
    }
  } catch (const Error& e) {
    transfer_failed(e);
  }
  report.verified = true;
  step(Step::Verified);

  if (!pending) {
    catalog_.call("create_lfile", {{"name", logical_name},
                                   {"size", measured},
                                   {"attributes", {{kStateAttr, {kPublishing}}, {"target", {target}}}}});
    report.catalog_updates.push_back("logical file " + logical_name);
  }
  step(Step::LogicalFileCreated);
  catalog_.call("attr_add", {{"entry", entry("collection", collection, collection)},
                             {"attr", catalog::kFilenameAttr},
                             {"values", {logical_name}}});
  report.catalog_updates.push_back("collection " + collection + " += " + logical_name);
  step(Step::CollectionUpdated);
  catalog_.call("attr_add", {{"entry", entry("location", collection, dst_location)},
                             {"attr", catalog::kFilenameAttr},
                             {"values", {logical_name}}});
  report.catalog_updates.push_back("location " + dst_location + " += " + logical_name);
  step(Step::LocationUpdated);
  catalog_.call("attr_delete", {{"entry", entry("lfile", collection, logical_name)}, {"attr", kStateAttr}});
  catalog_.call("attr_delete", {{"entry", entry("lfile", collection, logical_name)}, {"attr", "target"}});
  report.total_time = since(started);
  return report;
}

ReconcileReport ReplicaManager::reconcile(const std::string& collection, const std::string& location,
                                          const std::vector<std::string>& candidates) {
  const auto loc = catalog::get_location(catalog_, collection, location);
  std::set<std::string> names(candidates.begin(), candidates.end());
  names.insert(loc.filenames.begin(), loc.filenames.end());
  ReconcileReport out;
  for (const auto& n : names) {
    const bool present = storage_size(url_at(loc, n)).has_value();
    const bool listed = loc.filenames.count(n) > 0;
    if (present && !listed) out.orphans.push_back(n);
    if (!present && listed) out.dangling.push_back(n);
  }
  return out;
}

}  // namespace gftp::replica
