#include <CLI11.hpp>
#include <iomanip>
#include <iostream>

#include "common.hpp"
#include "gftp/catalog.hpp"

namespace {

using gftp::catalog::json;

void print_attributes(const json& attrs, const std::string& indent) {
  for (const auto& [k, vs] : attrs.items()) {
    std::cout << indent << k << ":";
    for (const auto& v : vs) std::cout << " " << v.get<std::string>();
    std::cout << "\n";
  }
}

void print_location_row(const json& l) {
  const auto loc = gftp::catalog::location_from_json(l);
  std::cout << std::left << std::setw(20) << loc.name << " " << gftp::catalog::join_url(loc, "");
  if (l.contains("filenames")) std::cout << "  (" << l["filenames"].size() << " files)";
  std::cout << "\n";
}

void print_table(const std::string& op, const json& r) {
  if (r.is_null()) {
    std::cout << "ok\n";
  } else if (r.is_string()) {
    std::cout << r.get<std::string>() << "\n";
  } else if (op == "list_collection") {
    std::cout << "collection " << r["name"].get<std::string>() << " (" << r["filenames"].size() << " files)\n";
    print_attributes(r["attributes"], "  ");
    for (const auto& f : r["filenames"]) std::cout << "  " << f.get<std::string>() << "\n";
  } else if (op == "list_locations") {
    for (const auto& l : r) print_location_row(l);
  } else if (op == "get_location") {
    print_location_row(r);
    print_attributes(r["attributes"], "  ");
    for (const auto& f : r["filenames"]) std::cout << "  " << f.get<std::string>() << "\n";
  } else if (op == "get_lfile") {
    std::cout << r["name"].get<std::string>() << "  " << r["size"].get<std::uint64_t>() << " bytes\n";
    print_attributes(r["attributes"], "  ");
  } else if (op == "find_locations") {
    for (const auto& l : r["locations"]) print_location_row(l);
    if (!r["unknown"].empty()) {
      std::cout << "not in collection:";
      for (const auto& u : r["unknown"]) std::cout << " " << u.get<std::string>();
      std::cout << "\n";
    }
  } else if (r.is_array()) {
    for (const auto& v : r) std::cout << (v.is_string() ? v.get<std::string>() : v.dump()) << "\n";
  } else {
    std::cout << r.dump(2) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rcat: replica catalog client"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string server = tools::default_catalog_server();
  bool as_json = false;
  app.add_option("--server", server, "catalog service host:port");
  app.add_flag("--json", as_json, "print the raw JSON result");

  std::string op;
  json args = json::object();
  std::string c, n, attr, kind, host, prefix, protocol = "gftp";
  std::uint16_t port = 0;
  std::uint64_t size = 0;
  bool force = false;
  bool with_filenames = false;
  std::vector<std::string> values;

  auto* col = app.add_subcommand("collection", "logical collections");
  col->require_subcommand(1);
  auto* col_create = col->add_subcommand("create", "create an empty collection");
  col_create->add_option("name", n)->required();
  auto* col_delete = col->add_subcommand("delete", "delete a collection");
  col_delete->add_option("name", n)->required();
  col_delete->add_flag("--force", force, "also delete its locations");
  auto* col_list = col->add_subcommand("list", "list collection names");
  auto* col_show = col->add_subcommand("show", "show a collection and its filenames");
  col_show->add_option("name", n)->required();

  auto* loc = app.add_subcommand("location", "location entries");
  loc->require_subcommand(1);
  auto* loc_create = loc->add_subcommand("create", "register a storage location for a collection");
  loc_create->add_option("collection", c)->required();
  loc_create->add_option("name", n)->required();
  loc_create->add_option("--host", host)->required();
  loc_create->add_option("--port", port);
  loc_create->add_option("--prefix", prefix, "path prefix on the storage system");
  loc_create->add_option("--protocol", protocol);
  auto* loc_delete = loc->add_subcommand("delete", "delete a location");
  loc_delete->add_option("collection", c)->required();
  loc_delete->add_option("name", n)->required();
  auto* loc_list = loc->add_subcommand("list", "list the locations of a collection");
  loc_list->add_option("collection", c)->required();
  auto* loc_show = loc->add_subcommand("show", "show one location and its filenames");
  loc_show->add_option("collection", c)->required();
  loc_show->add_option("name", n)->required();

  auto* lf = app.add_subcommand("lfile", "logical files");
  lf->require_subcommand(1);
  auto* lf_create = lf->add_subcommand("create", "create a logical file");
  lf_create->add_option("name", n)->required();
  lf_create->add_option("--size", size);
  auto* lf_delete = lf->add_subcommand("delete", "delete a logical file");
  lf_delete->add_option("name", n)->required();
  auto* lf_show = lf->add_subcommand("show", "show a logical file");
  lf_show->add_option("name", n)->required();

  auto* at = app.add_subcommand("attr", "attributes; 'filename' on a collection or location is its file list");
  at->require_subcommand(1);
  for (const auto* sub : {"add", "delete", "list"}) {
    auto* s = at->add_subcommand(sub, std::string(sub) + " attribute values");
    s->add_option("kind", kind, "collection, location or lfile")
        ->required()
        ->check(CLI::IsMember({"collection", "location", "lfile"}));
    s->add_option("name", n)->required();
    s->add_option("attr", attr)->required();
    if (std::string(sub) != "list") s->add_option("values", values);
    s->add_option("--collection", c, "collection of a location entry");
  }

  auto* find = app.add_subcommand("find", "locations holding all the given filenames");
  find->add_option("collection", c)->required();
  find->add_option("filenames", values);
  find->add_flag("--with-filenames", with_filenames, "include each location's filename list");

  auto* url = app.add_subcommand("url", "physical url of a file at a location");
  url->add_option("collection", c)->required();
  url->add_option("location", n)->required();
  url->add_option("filename", attr)->required();

  CLI11_PARSE(app, argc, argv);

  if (*col_create) op = "create_collection", args = {{"name", n}};
  if (*col_delete) op = "delete_collection", args = {{"name", n}, {"force", force}};
  if (*col_list) op = "list_collections";
  if (*col_show) op = "list_collection", args = {{"name", n}};
  if (*loc_create) {
    op = "create_location";
    args = {{"collection", c}, {"name", n}, {"protocol", protocol}, {"host", host}, {"port", port},
            {"path_prefix", prefix}};
  }
  if (*loc_delete) op = "delete_location", args = {{"collection", c}, {"name", n}};
  if (*loc_list) op = "list_locations", args = {{"collection", c}};
  if (*loc_show) op = "get_location", args = {{"collection", c}, {"name", n}};
  if (*lf_create) op = "create_lfile", args = {{"name", n}, {"size", size}};
  if (*lf_delete) op = "delete_lfile", args = {{"name", n}};
  if (*lf_show) op = "get_lfile", args = {{"name", n}};
  if (*at) {
    for (const auto* sub : {"add", "delete", "list"}) {
      if (!at->got_subcommand(sub)) continue;
      op = std::string("attr_") + sub;
      json entry = {{"kind", kind}, {"name", n}};
      if (kind == "location") {
        if (c.empty()) {
          std::cerr << "rcat: a location entry needs --collection\n";
          return tools::kFailure;
        }
        entry["collection"] = c;
      }
      args = {{"entry", entry}, {"attr", attr}};
      if (op != "attr_list") args["values"] = values;
    }
  }
  if (*find) op = "find_locations", args = {{"collection", c}, {"filenames", values}, {"with_filenames", with_filenames}};
  if (*url) op = "url_for", args = {{"collection", c}, {"location", n}, {"filename", attr}};

  try {
    gftp::catalog::RemoteHandle handle(gftp::wire::parse_endpoint(server));
    const auto result = handle.call(op, args);
    if (as_json) {
      std::cout << result.dump(2) << "\n";
    } else {
      print_table(op, result);
    }
  } catch (const gftp::Error& e) {
    return tools::report("rcat", e);
  }
  return 0;
}
