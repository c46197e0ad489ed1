#include <CLI11.hpp>
#include <iostream>

#include "common.hpp"
#include "gftp/replica.hpp"

namespace {

using gftp::catalog::json;
using gftp::replica::ManagedOpReport;

json report_json(const ManagedOpReport& r) {
  return {{"operation", r.operation},
          {"bytes_moved", r.bytes_moved},
          {"verified", r.verified},
          {"already_present", r.already_present},
          {"catalog_updates", r.catalog_updates},
          {"transfer_ms", r.transfer_time.count()},
          {"total_ms", r.total_time.count()}};
}

void print_report(const ManagedOpReport& r) {
  std::cout << r.operation << ": " << (r.already_present ? "already present" : "done") << ", " << r.bytes_moved
            << " bytes moved" << (r.verified ? ", verified" : "") << ", " << r.total_time.count() << " ms\n";
  for (const auto& u : r.catalog_updates) std::cout << "  " << u << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rman: replica management over gftp and the replica catalog"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string server = tools::default_catalog_server();
  std::string credentials_path = tools::default_credentials_path();
  bool as_json = false;
  bool verify = false;
  std::uint32_t parallelism = 4;
  app.add_option("--server", server, "catalog service host:port");
  app.add_option("--credentials", credentials_path, "credentials file (host:port user hexsecret lines)");
  app.add_flag("--json", as_json, "print the report as JSON");
  app.add_flag("--verify", verify, "compare SHA-256 checksums after each copy");
  app.add_option("-P,--parallel", parallelism, "parallel data channels")->check(CLI::Range(1, 64));

  std::string collection, location, src, dst, source, name;
  std::optional<std::uint64_t> size;
  std::vector<std::string> files;

  auto* reg = app.add_subcommand("register", "add files already on a location's storage to the catalog");
  reg->add_option("collection", collection)->required();
  reg->add_option("location", location)->required();
  reg->add_option("filenames", files)->required();

  auto* copy = app.add_subcommand("copy", "replicate a file between two locations of a collection");
  copy->add_option("collection", collection)->required();
  copy->add_option("filename", name)->required();
  copy->add_option("source", src, "source location")->required();
  copy->add_option("destination", dst, "destination location")->required();

  auto* publish = app.add_subcommand("publish", "copy a new file into a location and catalog it");
  publish->add_option("source", source, "gftp:// url or local path")->required();
  publish->add_option("collection", collection)->required();
  publish->add_option("location", location)->required();
  publish->add_option("name", name, "logical file name")->required();
  publish->add_option("--size", size, "expected size in bytes");

  auto* reconcile = app.add_subcommand("reconcile", "compare a location entry with its storage");
  reconcile->add_option("collection", collection)->required();
  reconcile->add_option("location", location)->required();
  reconcile->add_option("candidates", files, "extra names to probe on storage");

  CLI11_PARSE(app, argc, argv);

  try {
    gftp::catalog::RemoteHandle catalog(gftp::wire::parse_endpoint(server));
    gftp::client::ClientOptions copts;
    copts.verify = verify;
    gftp::client::Client client(gftp::client::Credentials::load(credentials_path), copts);
    gftp::replica::ReplicaOptions ropts;
    ropts.verify_checksum = verify;
    ropts.spec.parallelism = parallelism;
    gftp::replica::ReplicaManager manager(catalog, client, ropts);

    if (*reconcile) {
      const auto r = manager.reconcile(collection, location, files);
      if (as_json) {
        std::cout << json{{"orphans", r.orphans}, {"dangling", r.dangling}}.dump(2) << "\n";
      } else {
        for (const auto& o : r.orphans) std::cout << "orphan   " << o << "\n";
        for (const auto& d : r.dangling) std::cout << "dangling " << d << "\n";
        if (r.orphans.empty() && r.dangling.empty()) std::cout << "consistent\n";
      }
      return r.dangling.empty() ? tools::kOk : tools::kFailure;
    }

    ManagedOpReport rep;
    if (*reg) rep = manager.register_files(collection, location, files);
    if (*copy) rep = manager.copy_file(collection, name, src, dst);
    if (*publish) rep = manager.publish_file(source, collection, location, name, size);
    if (as_json) {
      std::cout << report_json(rep).dump(2) << "\n";
    } else {
      print_report(rep);
    }
  } catch (const gftp::Error& e) {
    return tools::report("rman", e);
  }
  return 0;
}
