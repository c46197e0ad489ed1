#pragma once

// Replica catalog: logical collections, their locations and logical files.
// Every operation is a JSON request {"op", "args"} so that the in-memory
// model, the journal and the wire service share one dispatch path.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gftp/net.hpp"
#include "gftp/wire.hpp"

namespace gftp::catalog {

using json = nlohmann::json;

inline constexpr std::uint16_t kDefaultPort = 39281;
inline constexpr std::size_t kMaxNameLength = 1024;
// The multi-valued attribute holding a collection's or location's file names.
inline constexpr std::string_view kFilenameAttr = "filename";

using Attributes = std::map<std::string, std::set<std::string>>;

struct Collection {
  std::string name;
  std::set<std::string> filenames;
  Attributes attributes;
  friend bool operator==(const Collection&, const Collection&) = default;
};

struct Location {
  std::string collection;
  std::string name;
  std::string protocol;
  std::string host;
  std::uint16_t port = 0;
  std::string path_prefix;
  std::set<std::string> filenames;
  Attributes attributes;
  friend bool operator==(const Location&, const Location&) = default;
};

struct LogicalFile {
  std::string name;
  std::uint64_t size = 0;
  Attributes attributes;
  friend bool operator==(const LogicalFile&, const LogicalFile&) = default;
};

enum class EntryKind { Collection, Location, LogicalFile };

// Names an entry: collections and logical files by name, locations by
// (collection, name).
struct EntryRef {
  EntryKind kind = EntryKind::Collection;
  std::string collection;
  std::string name;
};

struct FindResult {
  // Sorted by name; they point into the catalog and live as long as it is unmodified.
  std::vector<const Location*> locations;
  std::vector<std::string> unknown;  // queried names absent from the collection
};

// Throws Error(InvalidName).
void check_name(std::string_view name);
// "protocol://host:port/prefix/filename" with one '/' at each join.
std::string join_url(const Location& loc, std::string_view filename);

// The catalog state. Not thread-safe; Store adds locking and durability.
class Catalog {
 public:
  void create_collection(const std::string& name);
  void delete_collection(const std::string& name, bool force = false);
  void create_location(const Location& loc);  // filenames/attributes must be empty
  void delete_location(const std::string& collection, const std::string& name);
  void create_logical_file(const std::string& name, std::uint64_t size);
  void delete_logical_file(const std::string& name);

  // Set semantics; all-or-nothing. Filename values on a location must
  // already belong to the collection (SubsetViolation).
  void attr_add(const EntryRef& ref, const std::string& attr, const std::vector<std::string>& values);
  // Empty `values` removes the whole attribute. Removing a filename from a
  // collection also removes it from that collection's locations.
  void attr_delete(const EntryRef& ref, const std::string& attr, const std::vector<std::string>& values);
  std::vector<std::string> attr_list(const EntryRef& ref, const std::string& attr) const;

  const Collection& collection(const std::string& name) const;
  const Location& location(const std::string& collection, const std::string& name) const;
  const LogicalFile& logical_file(const std::string& name) const;
  std::vector<std::string> collection_names() const;
  std::vector<Location> locations(const std::string& collection) const;
  FindResult find_locations(const std::string& collection, const std::vector<std::string>& filenames) const;
  std::string url_for(const std::string& collection, const std::string& location, const std::string& filename) const;

  bool subset_invariant_holds() const;
  std::size_t collection_count() const noexcept { return collections_.size(); }

  // Applies a request and returns its result; throws Error on failure with
  // the catalog unchanged.
  json apply(const json& request);
  static bool is_mutation(std::string_view op);

  json to_json() const;
  static Catalog from_json(const json& j);
  friend bool operator==(const Catalog& a, const Catalog& b);

 private:
  // One bit per location slot.
  using SlotSet = std::vector<std::uint64_t>;

  struct CollectionState {
    Collection entry;
    std::map<std::string, Location> locations;
    // Slot i holds a location name, or "" when free; slots are reused.
    std::vector<std::string> slots;
    std::map<std::string, std::size_t> slot_of;
    // filename -> slots of the locations holding it
    std::map<std::string, SlotSet> index;

    std::size_t claim_slot(const std::string& location);
    void release_slot(const std::string& location);
    void index_add(const std::string& filename, std::size_t slot);
    void index_remove(const std::string& filename, std::size_t slot);
  };
  CollectionState& state(const std::string& name);
  const CollectionState& state(const std::string& name) const;
  Attributes& attributes(const EntryRef& ref);
  const Attributes& attributes(const EntryRef& ref) const;

  std::map<std::string, CollectionState> collections_;
  std::map<std::string, LogicalFile> files_;
};

// ---- persistence ----

enum class SyncMode { Always, Never };

// Journal: header line, then one "<crc32 hex> <json>" line per mutation.
// Snapshot: header line, then the catalog as JSON with the last applied
// sequence number. Replay stops at the first damaged or partial line.
class Store {
 public:
  static constexpr std::string_view kJournalHeader = "GFTPCAT-JOURNAL 1";
  static constexpr std::string_view kSnapshotHeader = "GFTPCAT-SNAPSHOT 1";

  explicit Store(std::filesystem::path dir, SyncMode sync = SyncMode::Always,
                 std::uint64_t snapshot_every = 100000);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  // Reads run concurrently; mutations are serialized and acknowledged only
  // once journaled.
  json execute(const json& request);
  // Writes a snapshot and starts a fresh journal.
  void snapshot();

  Catalog copy() const;
  std::uint64_t sequence() const;
  std::uint64_t replayed() const noexcept { return replayed_; }
  const std::filesystem::path& journal_path() const noexcept { return journal_path_; }

 private:
  void load();
  void open_journal(bool truncate);
  void append(const json& request);

  std::filesystem::path dir_;
  std::filesystem::path journal_path_;
  std::filesystem::path snapshot_path_;
  SyncMode sync_;
  std::uint64_t snapshot_every_;
  mutable std::shared_mutex mu_;
  Catalog catalog_;
  std::uint64_t seq_ = 0;
  std::uint64_t since_snapshot_ = 0;
  std::uint64_t replayed_ = 0;
  int journal_fd_ = -1;
  bool failed_ = false;
};

// ---- access ----

// Anything that executes catalog requests: a local Store or a remote service.
class Handle {
 public:
  virtual ~Handle() = default;
  // Returns the result or throws Error with the reported code.
  virtual json call(const std::string& op, const json& args) = 0;
};

// Locks taken through a LocalHandle belong to the calling thread.
class LocalHandle final : public Handle {
 public:
  explicit LocalHandle(Store& store) : store_(store) {}
  json call(const std::string& op, const json& args) override;

 private:
  Store& store_;
  std::mutex mu_;
  std::map<std::string, std::thread::id> locks_;
};

// One TCP connection to a catalog service; reconnects on demand.
class RemoteHandle final : public Handle {
 public:
  explicit RemoteHandle(wire::DataEndpoint server, net::Millis timeout = net::Millis{30000});
  json call(const std::string& op, const json& args) override;

 private:
  wire::DataEndpoint server_;
  net::Millis timeout_;
  std::mutex mu_;
  std::unique_ptr<net::Socket> socket_;
  std::unique_ptr<net::BufferedReader> reader_;
};

// Newline-delimited JSON over TCP. Besides catalog ops it serves "lock" and
// "unlock" of advisory per-name locks, released when their connection closes.
class Service {
 public:
  Service(Store& store, std::string host, std::uint16_t port);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  void start();
  void stop();
  std::uint16_t port() const noexcept { return port_; }

 private:
  struct Conn {
    net::Socket socket;
    std::jthread thread;
    std::atomic<bool> done{false};
  };
  void accept_loop();
  void serve(Conn* conn);
  json handle(const json& request, std::uint64_t conn_id);
  void release_locks(std::uint64_t conn_id);

  Store& store_;
  std::string host_;
  std::uint16_t port_;
  net::Listener listener_;
  std::atomic<bool> stopping_{false};
  std::jthread acceptor_;
  std::mutex conn_mu_;
  std::vector<std::unique_ptr<Conn>> conns_;
  std::mutex lock_mu_;
  std::map<std::string, std::uint64_t> locks_;
  std::atomic<std::uint64_t> next_conn_{1};
};

// Typed helpers over a Handle.
Collection list_collection(Handle& h, const std::string& name);
std::vector<Location> find_locations(Handle& h, const std::string& collection,
                                     const std::vector<std::string>& filenames);
Location get_location(Handle& h, const std::string& collection, const std::string& name);
std::string url_for(Handle& h, const std::string& collection, const std::string& location,
                    const std::string& filename);

json to_json(const Collection& c);
json to_json(const Location& l, bool with_filenames = true);
json to_json(const LogicalFile& f);
Collection collection_from_json(const json& j);
Location location_from_json(const json& j);
LogicalFile logical_file_from_json(const json& j);

}  // namespace gftp::catalog
