#pragma once

// Reference model of the catalog: plain maps, brute-force queries, no index.
// Used as the oracle for model-based and crash-replay tests.

#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gftp/errors.hpp"

namespace gftp::testing {

using json = nlohmann::json;

class CatalogModel {
 public:
  using Attrs = std::map<std::string, std::set<std::string>>;
  struct Loc {
    std::string protocol, host, prefix;
    std::uint16_t port = 0;
    std::set<std::string> files;
    Attrs attrs;
  };
  struct Col {
    std::set<std::string> files;
    Attrs attrs;
    std::map<std::string, Loc> locs;
  };
  struct File {
    std::uint64_t size = 0;
    Attrs attrs;
  };

  // Result on success, or the error code the catalog must report.
  struct Outcome {
    std::optional<Errc> error;
    json result;
  };

  static bool mutation(const std::string& op) {
    return op == "create_collection" || op == "delete_collection" || op == "create_location" ||
           op == "delete_location" || op == "create_lfile" || op == "delete_lfile" || op == "attr_add" ||
           op == "attr_delete";
  }

  Outcome apply(const json& req) {
    const auto op = req.at("op").get<std::string>();
    const auto& a = req.at("args");
    auto err = [](Errc e) { return Outcome{e, nullptr}; };
    auto ok = [](json r = nullptr) { return Outcome{std::nullopt, std::move(r)}; };

    if (op == "create_collection") {
      const auto n = a.at("name").get<std::string>();
      if (!valid(n)) return err(Errc::InvalidName);
      if (cols.count(n)) return err(Errc::Duplicate);
      cols[n];
      return ok();
    }
    if (op == "delete_collection") {
      const auto n = a.at("name").get<std::string>();
      if (!cols.count(n)) return err(Errc::NotFound);
      if (!cols[n].locs.empty() && !a.value("force", false)) return err(Errc::HasLocations);
      cols.erase(n);
      return ok();
    }
    if (op == "create_location") {
      const auto c = a.at("collection").get<std::string>();
      const auto n = a.at("name").get<std::string>();
      Loc l{a.at("protocol").get<std::string>(), a.at("host").get<std::string>(),
            a.at("path_prefix").get<std::string>(), a.at("port").get<std::uint16_t>(), {}, {}};
      if (!valid(n) || !valid(l.protocol) || !valid(l.host)) return err(Errc::InvalidName);
      if (!cols.count(c)) return err(Errc::NotFound);
      auto& col = cols[c];
      if (col.locs.count(n)) return err(Errc::Duplicate);
      for (const auto& [_, o] : col.locs) {
        if (o.protocol == l.protocol && o.host == l.host && o.port == l.port && trim(o.prefix) == trim(l.prefix)) {
          return err(Errc::DuplicateStorage);
        }
      }
      col.locs[n] = l;
      return ok();
    }
    if (op == "delete_location") {
      const auto c = a.at("collection").get<std::string>();
      if (!cols.count(c) || !cols[c].locs.erase(a.at("name").get<std::string>())) return err(Errc::NotFound);
      return ok();
    }
    if (op == "create_lfile") {
      const auto n = a.at("name").get<std::string>();
      if (!valid(n)) return err(Errc::InvalidName);
      if (files.count(n)) return err(Errc::Duplicate);
      files[n] = File{a.value("size", std::uint64_t{0}), {}};
      return ok();
    }
    if (op == "delete_lfile") {
      if (!files.erase(a.at("name").get<std::string>())) return err(Errc::NotFound);
      return ok();
    }
    if (op == "attr_add" || op == "attr_delete" || op == "attr_list") {
      const auto& e = a.at("entry");
      const auto kind = e.at("kind").get<std::string>();
      const auto attr = a.at("attr").get<std::string>();
      std::vector<std::string> values;
      for (const auto& v : a.value("values", json::array())) values.push_back(v.get<std::string>());
      if (op == "attr_add") {
        if (!valid(attr)) return err(Errc::InvalidName);
        for (const auto& v : values) {
          if (!valid(v)) return err(Errc::InvalidName);
        }
      }
      Col* col = nullptr;
      Loc* loc = nullptr;
      Attrs* attrs = nullptr;
      if (kind == "collection") {
        if (!cols.count(e.at("name").get<std::string>())) return err(Errc::NotFound);
        col = &cols[e.at("name").get<std::string>()];
        attrs = &col->attrs;
      } else if (kind == "location") {
        const auto c = e.at("collection").get<std::string>();
        if (!cols.count(c)) return err(Errc::NotFound);
        col = &cols[c];
        const auto it = col->locs.find(e.at("name").get<std::string>());
        if (it == col->locs.end()) return err(Errc::NotFound);
        loc = &it->second;
        attrs = &loc->attrs;
      } else {
        const auto it = files.find(e.at("name").get<std::string>());
        if (it == files.end()) return err(Errc::NotFound);
        attrs = &it->second.attrs;
      }
      const bool fn = attr == "filename" && kind != "lfile";
      std::set<std::string>* target = fn ? (loc ? &loc->files : &col->files) : nullptr;
      if (op == "attr_list") {
        if (fn) return ok(json(std::vector<std::string>(target->begin(), target->end())));
        const auto it = attrs->find(attr);
        if (it == attrs->end()) return ok(json::array());
        return ok(json(std::vector<std::string>(it->second.begin(), it->second.end())));
      }
      if (op == "attr_add") {
        if (!fn) {
          if (!values.empty()) (*attrs)[attr].insert(values.begin(), values.end());
          return ok();
        }
        if (loc) {
          for (const auto& v : values) {
            if (!col->files.count(v)) return err(Errc::SubsetViolation);
          }
        }
        target->insert(values.begin(), values.end());
        return ok();
      }
      if (!fn) {
        const auto it = attrs->find(attr);
        if (it == attrs->end()) return ok();
        if (values.empty()) {
          attrs->erase(it);
          return ok();
        }
        for (const auto& v : values) it->second.erase(v);
        if (it->second.empty()) attrs->erase(it);
        return ok();
      }
      if (values.empty()) values.assign(target->begin(), target->end());
      for (const auto& v : values) {
        target->erase(v);
        if (!loc) {
          for (auto& [_, l] : col->locs) l.files.erase(v);
        }
      }
      return ok();
    }
    if (op == "list_collection") {
      const auto n = a.at("name").get<std::string>();
      if (!cols.count(n)) return err(Errc::NotFound);
      return ok(collection_json(n, cols[n]));
    }
    if (op == "list_collections") {
      std::vector<std::string> names;
      for (const auto& [n, _] : cols) names.push_back(n);
      return ok(names);
    }
    if (op == "list_locations") {
      const auto c = a.at("collection").get<std::string>();
      if (!cols.count(c)) return err(Errc::NotFound);
      json out = json::array();
      for (const auto& [n, l] : cols[c].locs) out.push_back(location_json(c, n, l));
      return ok(out);
    }
    if (op == "get_location") {
      const auto c = a.at("collection").get<std::string>();
      if (!cols.count(c) || !cols[c].locs.count(a.at("name").get<std::string>())) return err(Errc::NotFound);
      const auto n = a.at("name").get<std::string>();
      return ok(location_json(c, n, cols[c].locs[n]));
    }
    if (op == "get_lfile") {
      const auto n = a.at("name").get<std::string>();
      if (!files.count(n)) return err(Errc::NotFound);
      return ok(file_json(n, files[n]));
    }
    if (op == "find_locations") {
      const auto c = a.at("collection").get<std::string>();
      if (!cols.count(c)) return err(Errc::NotFound);
      std::set<std::string> q;
      for (const auto& v : a.value("filenames", json::array())) q.insert(v.get<std::string>());
      json locs = json::array();
      std::vector<std::string> unknown;
      for (const auto& f : q) {
        if (!cols[c].files.count(f)) unknown.push_back(f);
      }
      for (const auto& [n, l] : cols[c].locs) {
        bool all = true;
        for (const auto& f : q) all = all && l.files.count(f);
        if (!all) continue;
        auto j = location_json(c, n, l);
        if (!a.value("with_filenames", false)) j.erase("filenames");
        locs.push_back(j);
      }
      return ok(json{{"locations", locs}, {"unknown", unknown}});
    }
    if (op == "url_for") {
      const auto c = a.at("collection").get<std::string>();
      const auto n = a.at("location").get<std::string>();
      const auto f = a.at("filename").get<std::string>();
      if (!cols.count(c) || !cols[c].locs.count(n)) return err(Errc::NotFound);
      const auto& l = cols[c].locs[n];
      if (!l.files.count(f)) return err(Errc::NotRegisteredHere);
      std::string url = l.protocol + "://" + l.host + (l.port ? ":" + std::to_string(l.port) : "") + "/";
      if (!trim(l.prefix).empty()) url += trim(l.prefix) + "/";
      return ok(url + f);
    }
    return err(Errc::BadRequest);
  }

  // Same layout as Catalog::to_json.
  json to_json() const {
    json c = json::array(), l = json::array(), f = json::array();
    for (const auto& [n, col] : cols) {
      c.push_back(collection_json(n, col));
      for (const auto& [ln, loc] : col.locs) l.push_back(location_json(n, ln, loc));
    }
    for (const auto& [n, file] : files) f.push_back(file_json(n, file));
    return {{"collections", c}, {"locations", l}, {"lfiles", f}};
  }

  std::map<std::string, Col> cols;
  std::map<std::string, File> files;

 private:
  static bool valid(const std::string& s) {
    return !s.empty() && s.size() <= 1024 && s.find_first_of("\r\n") == std::string::npos;
  }
  static std::string trim(std::string s) {
    while (!s.empty() && s.front() == '/') s.erase(0, 1);
    while (!s.empty() && s.back() == '/') s.pop_back();
    return s;
  }
  static json attrs_json(const Attrs& a) {
    json out = json::object();
    for (const auto& [k, v] : a) out[k] = std::vector<std::string>(v.begin(), v.end());
    return out;
  }
  static json collection_json(const std::string& n, const Col& c) {
    return {{"name", n},
            {"filenames", std::vector<std::string>(c.files.begin(), c.files.end())},
            {"attributes", attrs_json(c.attrs)}};
  }
  static json location_json(const std::string& c, const std::string& n, const Loc& l) {
    return {{"collection", c},
            {"name", n},
            {"protocol", l.protocol},
            {"host", l.host},
            {"port", l.port},
            {"path_prefix", l.prefix},
            {"filenames", std::vector<std::string>(l.files.begin(), l.files.end())},
            {"attributes", attrs_json(l.attrs)}};
  }
  static json file_json(const std::string& n, const File& f) {
    return {{"name", n}, {"size", f.size}, {"attributes", attrs_json(f.attrs)}};
  }
};

// Random catalog requests over small name pools so that collisions, cascades
// and error paths are common.
class CatalogOpGenerator {
 public:
  explicit CatalogOpGenerator(std::uint64_t seed) : rng_(seed) {}

  json next() {
    switch (pick(16)) {
      case 0:
      case 1: return req("create_collection", {{"name", name("c", 3)}});
      case 2: return req("delete_collection", {{"name", name("c", 3)}, {"force", pick(2) == 0}});
      case 3:
      case 4:
        return req("create_location", {{"collection", name("c", 3)},
                                       {"name", name("l", 4)},
                                       {"protocol", "gftp"},
                                       {"host", name("h", 2)},
                                       {"port", static_cast<int>(pick(2))},
                                       {"path_prefix", prefix()}});
      case 5: return req("delete_location", {{"collection", name("c", 3)}, {"name", name("l", 4)}});
      case 6: return req("create_lfile", {{"name", name("x", 3)}, {"size", pick(1000)}});
      case 7: return req("delete_lfile", {{"name", name("x", 3)}});
      case 8:
      case 9:
      case 10: return req("attr_add", {{"entry", entry()}, {"attr", attr()}, {"values", values()}});
      case 11: return req("attr_delete", {{"entry", entry()}, {"attr", attr()}, {"values", values(true)}});
      case 12: return req("find_locations", {{"collection", name("c", 3)}, {"filenames", values(true)}, {"with_filenames", true}});
      case 13:
        return req("url_for", {{"collection", name("c", 3)}, {"location", name("l", 4)}, {"filename", name("f", 6)}});
      case 14: return req("attr_list", {{"entry", entry()}, {"attr", attr()}});
      default: return req("list_collection", {{"name", name("c", 3)}});
    }
  }

 private:
  std::uint64_t pick(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng_); }
  static json req(const char* op, json args) { return {{"op", op}, {"args", std::move(args)}}; }
  std::string name(const char* stem, int pool) {
    if (pick(60) == 0) return "";  // invalid
    return stem + std::to_string(pick(pool));
  }
  std::string prefix() {
    static const char* kPrefixes[] = {"", "/a", "a/", "/b/", "b/c"};
    return kPrefixes[pick(5)];
  }
  std::string attr() { return pick(2) ? "filename" : "a" + std::to_string(pick(2)); }
  json entry() {
    switch (pick(3)) {
      case 0: return {{"kind", "collection"}, {"name", name("c", 3)}};
      case 1: return {{"kind", "location"}, {"collection", name("c", 3)}, {"name", name("l", 4)}};
      default: return {{"kind", "lfile"}, {"name", name("x", 3)}};
    }
  }
  json values(bool allow_empty = false) {
    json out = json::array();
    const auto n = allow_empty ? pick(4) : 1 + pick(3);
    for (std::uint64_t i = 0; i < n; ++i) out.push_back(name("f", 6));
    return out;
  }

  std::mt19937_64 rng_;
};

}  // namespace gftp::testing
