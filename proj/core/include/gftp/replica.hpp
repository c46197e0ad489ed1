#pragma once

// Replica management: storage operations through the transfer client
// composed with catalog updates. Data is always written and verified
// before the catalog mentions it, so a crash can orphan a file on storage
// but never leave the catalog pointing at a missing one.

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gftp/catalog.hpp"
#include "gftp/client.hpp"

namespace gftp::replica {

using Millis = std::chrono::milliseconds;

// Points between the steps of an operation where a crash can be injected.
enum class Step {
  DataCopied,          // transfer finished, not yet verified
  Verified,            // data verified, catalog untouched
  LogicalFileCreated,  // publish: logical file entry exists
  CollectionUpdated,   // name added to the collection
  LocationUpdated,     // name added to the location
};
std::string_view step_name(Step step);

struct ManagedOpReport {
  std::string operation;  // "register", "copy" or "publish"
  std::uint64_t bytes_moved = 0;
  bool verified = false;
  bool already_present = false;
  std::vector<std::string> catalog_updates;  // ops applied, in order
  Millis transfer_time{0};
  Millis total_time{0};
};

struct ReconcileReport {
  std::vector<std::string> orphans;   // on storage, not in the location
  std::vector<std::string> dangling;  // in the location, missing on storage
};

struct ReplicaOptions {
  bool verify_checksum = false;
  data::TransferSpec spec;
  Millis lock_timeout{30000};
  // Called at each Step; throwing from it simulates a crash there.
  std::function<void(Step)> fault;
};

class ReplicaManager {
 public:
  ReplicaManager(catalog::Handle& catalog, client::Client& client, ReplicaOptions options = {});

  // Adds files already present on the location's storage to the collection
  // and the location. All-or-nothing; idempotent. Throws
  // Error(MissingOnStorage / NotFound / CatalogUnavailable).
  ManagedOpReport register_files(const std::string& collection, const std::string& location,
                                 const std::vector<std::string>& filenames);

  // Third-party copy between two locations of one collection, then adds the
  // file to the destination location. Throws Error(NotAtSource /
  // TransferFailed / NotFound).
  ManagedOpReport copy_file(const std::string& collection, const std::string& filename,
                            const std::string& src_location, const std::string& dst_location);

  // Copies a file from outside the catalog (a gftp:// url or a local path)
  // into dst_location and creates its logical file, collection and location
  // entries in that order. Throws Error(PublishConflict / TransferFailed /
  // SourceUnreadable / NotFound).
  ManagedOpReport publish_file(const std::string& source, const std::string& collection,
                               const std::string& dst_location, const std::string& logical_name,
                               std::optional<std::uint64_t> size = {});

  // Probes each candidate name at the location's storage and compares with
  // the location entry. The location's own filenames are always probed.
  ReconcileReport reconcile(const std::string& collection, const std::string& location,
                            const std::vector<std::string>& candidates = {});

  // The attribute marking a logical file whose publish has not finished.
  static constexpr std::string_view kStateAttr = "state";
  static constexpr std::string_view kPublishing = "publishing";

 private:
  class NameLock;
  client::GridUrl url_at(const catalog::Location& loc, const std::string& filename) const;
  void step(Step s);
  std::optional<std::uint64_t> storage_size(const client::GridUrl& url);

  catalog::Handle& catalog_;
  client::Client& client_;
  ReplicaOptions options_;
};

}  // namespace gftp::replica
