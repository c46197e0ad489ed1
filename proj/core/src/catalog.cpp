#include "gftp/catalog.hpp"

#include <algorithm>

#include "gftp/errors.hpp"

namespace gftp::catalog {

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto d = static_cast<unsigned char>(s[i + k]);
      if ((d & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (d & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
    i += extra + 1;
  }
  return true;
}

EntryRef ref_from_json(const json& j) {
  EntryRef r;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "collection") {
    r.kind = EntryKind::Collection;
  } else if (kind == "location") {
    r.kind = EntryKind::Location;
    r.collection = j.at("collection").get<std::string>();
  } else if (kind == "lfile") {
    r.kind = EntryKind::LogicalFile;
  } else {
    fail(Errc::BadRequest, "unknown entry kind " + kind);
  }
  r.name = j.at("name").get<std::string>();
  return r;
}

std::vector<std::string> strings(const json& j) {
  std::vector<std::string> out;
  if (j.is_null()) return out;
  for (const auto& v : j) out.push_back(v.get<std::string>());
  return out;
}

json attrs_json(const Attributes& a) {
  json out = json::object();
  for (const auto& [k, v] : a) out[k] = std::vector<std::string>(v.begin(), v.end());
  return out;
}

Attributes attrs_from(const json& j) {
  Attributes a;
  if (!j.is_object()) return a;
  for (const auto& [k, v] : j.items()) {
    auto& set = a[k];
    for (const auto& s : v) set.insert(s.get<std::string>());
  }
  return a;
}

std::string trim_slashes(std::string_view s) {
  while (!s.empty() && s.front() == '/') s.remove_prefix(1);
  while (!s.empty() && s.back() == '/') s.remove_suffix(1);
  return std::string(s);
}

}  // namespace

void check_name(std::string_view name) {
  if (name.empty()) fail(Errc::InvalidName, "empty name");
  if (name.size() > kMaxNameLength) fail(Errc::InvalidName, "name longer than 1024 bytes");
  if (name.find_first_of("\r\n") != std::string_view::npos) fail(Errc::InvalidName, "name contains CR or LF");
  if (!valid_utf8(name)) fail(Errc::InvalidName, "name is not UTF-8");
}

std::string join_url(const Location& loc, std::string_view filename) {
  std::string url = loc.protocol + "://" + loc.host;
  if (loc.port) url += ":" + std::to_string(loc.port);
  url += "/";
  const auto prefix = trim_slashes(loc.path_prefix);
  if (!prefix.empty()) url += prefix + "/";
  std::string_view name = filename;
  while (!name.empty() && name.front() == '/') name.remove_prefix(1);
  url += name;
  return url;
}

// ---- state access ----

Catalog::CollectionState& Catalog::state(const std::string& name) {
  const auto it = collections_.find(name);
  if (it == collections_.end()) fail(Errc::NotFound, "collection " + name);
  return it->second;
}

const Catalog::CollectionState& Catalog::state(const std::string& name) const {
  const auto it = collections_.find(name);
  if (it == collections_.end()) fail(Errc::NotFound, "collection " + name);
  return it->second;
}

Attributes& Catalog::attributes(const EntryRef& ref) {
  return const_cast<Attributes&>(std::as_const(*this).attributes(ref));
}

const Attributes& Catalog::attributes(const EntryRef& ref) const {
  switch (ref.kind) {
    case EntryKind::Collection: return state(ref.name).entry.attributes;
    case EntryKind::Location: return location(ref.collection, ref.name).attributes;
    case EntryKind::LogicalFile: return logical_file(ref.name).attributes;
  }
  fail(Errc::BadRequest, "bad entry kind");
}

const Collection& Catalog::collection(const std::string& name) const { return state(name).entry; }

const Location& Catalog::location(const std::string& collection, const std::string& name) const {
  const auto& st = state(collection);
  const auto it = st.locations.find(name);
  if (it == st.locations.end()) fail(Errc::NotFound, "location " + name + " in " + collection);
  return it->second;
}

const LogicalFile& Catalog::logical_file(const std::string& name) const {
  const auto it = files_.find(name);
  if (it == files_.end()) fail(Errc::NotFound, "logical file " + name);
  return it->second;
}

std::vector<std::string> Catalog::collection_names() const {
  std::vector<std::string> out;
  for (const auto& [name, st] : collections_) out.push_back(name);
  return out;
}

std::vector<Location> Catalog::locations(const std::string& collection) const {
  std::vector<Location> out;
  for (const auto& [name, loc] : state(collection).locations) out.push_back(loc);
  return out;
}

// ---- location slots ----

std::size_t Catalog::CollectionState::claim_slot(const std::string& location) {
  auto free = std::find(slots.begin(), slots.end(), std::string());
  if (free == slots.end()) free = slots.insert(slots.end(), std::string());
  *free = location;
  const auto slot = static_cast<std::size_t>(free - slots.begin());
  slot_of[location] = slot;
  return slot;
}

void Catalog::CollectionState::release_slot(const std::string& location) {
  const auto it = slot_of.find(location);
  slots[it->second].clear();
  slot_of.erase(it);
}

void Catalog::CollectionState::index_add(const std::string& filename, std::size_t slot) {
  auto& bits = index[filename];
  if (bits.size() <= slot / 64) bits.resize(slot / 64 + 1);
  bits[slot / 64] |= std::uint64_t{1} << (slot % 64);
}

void Catalog::CollectionState::index_remove(const std::string& filename, std::size_t slot) {
  const auto it = index.find(filename);
  if (it == index.end() || it->second.size() <= slot / 64) return;
  it->second[slot / 64] &= ~(std::uint64_t{1} << (slot % 64));
  if (std::all_of(it->second.begin(), it->second.end(), [](std::uint64_t w) { return w == 0; })) index.erase(it);
}

// ---- mutations ----

void Catalog::create_collection(const std::string& name) {
  check_name(name);
  if (collections_.count(name)) fail(Errc::Duplicate, "collection " + name);
  collections_[name].entry.name = name;
}

void Catalog::delete_collection(const std::string& name, bool force) {
  auto& st = state(name);
  if (!st.locations.empty() && !force) {
    fail(Errc::HasLocations, name + " has " + std::to_string(st.locations.size()) + " locations");
  }
  collections_.erase(name);
}

void Catalog::create_location(const Location& loc) {
  check_name(loc.name);
  check_name(loc.protocol);
  check_name(loc.host);
  if (loc.path_prefix.find_first_of("\r\n") != std::string::npos) fail(Errc::InvalidName, "path prefix");
  auto& st = state(loc.collection);
  if (st.locations.count(loc.name)) fail(Errc::Duplicate, "location " + loc.name);
  const auto prefix = trim_slashes(loc.path_prefix);
  for (const auto& [name, other] : st.locations) {
    if (other.protocol == loc.protocol && other.host == loc.host && other.port == loc.port &&
        trim_slashes(other.path_prefix) == prefix) {
      fail(Errc::DuplicateStorage, "storage already registered as " + name);
    }
  }
  auto& fresh = st.locations[loc.name];
  fresh = loc;
  fresh.filenames.clear();
  fresh.attributes.clear();
  st.claim_slot(loc.name);
}

void Catalog::delete_location(const std::string& collection, const std::string& name) {
  auto& st = state(collection);
  const auto it = st.locations.find(name);
  if (it == st.locations.end()) fail(Errc::NotFound, "location " + name + " in " + collection);
  const auto slot = st.slot_of.at(name);
  for (const auto& f : it->second.filenames) st.index_remove(f, slot);
  st.release_slot(name);
  st.locations.erase(it);
}

void Catalog::create_logical_file(const std::string& name, std::uint64_t size) {
  check_name(name);
  if (files_.count(name)) fail(Errc::Duplicate, "logical file " + name);
  files_[name] = LogicalFile{name, size, {}};
}

void Catalog::delete_logical_file(const std::string& name) {
  if (!files_.erase(name)) fail(Errc::NotFound, "logical file " + name);
}

void Catalog::attr_add(const EntryRef& ref, const std::string& attr, const std::vector<std::string>& values) {
  check_name(attr);
  for (const auto& v : values) check_name(v);
  const bool filenames = attr == kFilenameAttr && ref.kind != EntryKind::LogicalFile;
  if (!filenames) {
    auto& a = attributes(ref);
    a[attr].insert(values.begin(), values.end());
    if (a[attr].empty()) a.erase(attr);
    return;
  }
  auto& st = state(ref.kind == EntryKind::Location ? ref.collection : ref.name);
  if (ref.kind == EntryKind::Collection) {
    st.entry.filenames.insert(values.begin(), values.end());
    return;
  }
  const auto it = st.locations.find(ref.name);
  if (it == st.locations.end()) fail(Errc::NotFound, "location " + ref.name + " in " + ref.collection);
  for (const auto& v : values) {
    if (!st.entry.filenames.count(v)) fail(Errc::SubsetViolation, v + " is not in collection " + ref.collection);
  }
  const auto slot = st.slot_of.at(ref.name);
  for (const auto& v : values) {
    if (it->second.filenames.insert(v).second) st.index_add(v, slot);
  }
}

void Catalog::attr_delete(const EntryRef& ref, const std::string& attr, const std::vector<std::string>& values) {
  const bool filenames = attr == kFilenameAttr && ref.kind != EntryKind::LogicalFile;
  if (!filenames) {
    auto& a = attributes(ref);
    const auto it = a.find(attr);
    if (it == a.end()) return;
    if (values.empty()) {
      a.erase(it);
      return;
    }
    for (const auto& v : values) it->second.erase(v);
    if (it->second.empty()) a.erase(it);
    return;
  }
  auto& st = state(ref.kind == EntryKind::Location ? ref.collection : ref.name);
  if (ref.kind == EntryKind::Location) {
    const auto it = st.locations.find(ref.name);
    if (it == st.locations.end()) fail(Errc::NotFound, "location " + ref.name + " in " + ref.collection);
    auto& names = it->second.filenames;
    const std::vector<std::string> doomed = values.empty() ? std::vector<std::string>(names.begin(), names.end())
                                                           : values;
    const auto slot = st.slot_of.at(ref.name);
    for (const auto& v : doomed) {
      if (names.erase(v)) st.index_remove(v, slot);
    }
    return;
  }
  auto& names = st.entry.filenames;
  const std::vector<std::string> doomed = values.empty() ? std::vector<std::string>(names.begin(), names.end())
                                                         : values;
  for (const auto& v : doomed) {
    if (!names.erase(v)) continue;
    // Keep every location a subset of its collection.
    auto idx = st.index.find(v);
    if (idx == st.index.end()) continue;
    for (std::size_t slot = 0; slot < st.slots.size(); ++slot) {
      if (slot / 64 < idx->second.size() && (idx->second[slot / 64] >> (slot % 64) & 1)) {
        st.locations.at(st.slots[slot]).filenames.erase(v);
      }
    }
    st.index.erase(idx);
  }
}

std::vector<std::string> Catalog::attr_list(const EntryRef& ref, const std::string& attr) const {
  if (attr == kFilenameAttr && ref.kind == EntryKind::Collection) {
    const auto& f = collection(ref.name).filenames;
    return {f.begin(), f.end()};
  }
  if (attr == kFilenameAttr && ref.kind == EntryKind::Location) {
    const auto& f = location(ref.collection, ref.name).filenames;
    return {f.begin(), f.end()};
  }
  const auto& a = attributes(ref);
  const auto it = a.find(attr);
  if (it == a.end()) return {};
  return {it->second.begin(), it->second.end()};
}

// ---- queries ----

FindResult Catalog::find_locations(const std::string& collection, const std::vector<std::string>& filenames) const {
  const auto& st = state(collection);
  FindResult out;
  if (filenames.empty()) {
    for (const auto& [name, loc] : st.locations) out.locations.push_back(&loc);
    return out;
  }
  SlotSet common((st.slots.size() + 63) / 64, ~std::uint64_t{0});
  for (const auto& f : std::set<std::string>(filenames.begin(), filenames.end())) {
    if (!st.entry.filenames.count(f)) out.unknown.push_back(f);
    const auto idx = st.index.find(f);
    for (std::size_t w = 0; w < common.size(); ++w) {
      common[w] &= idx != st.index.end() && w < idx->second.size() ? idx->second[w] : 0;
    }
  }
  for (std::size_t slot = 0; slot < st.slots.size(); ++slot) {
    if (common[slot / 64] >> (slot % 64) & 1) out.locations.push_back(&st.locations.at(st.slots[slot]));
  }
  std::sort(out.locations.begin(), out.locations.end(), [](auto* a, auto* b) { return a->name < b->name; });
  return out;
}

std::string Catalog::url_for(const std::string& collection, const std::string& location,
                             const std::string& filename) const {
  const auto& loc = this->location(collection, location);
  if (!loc.filenames.count(filename)) fail(Errc::NotRegisteredHere, filename + " is not at " + location);
  return join_url(loc, filename);
}

bool Catalog::subset_invariant_holds() const {
  for (const auto& [name, st] : collections_) {
    if (st.slot_of.size() != st.locations.size()) return false;
    CollectionState rebuilt;
    for (const auto& [lname, loc] : st.locations) {
      const auto slot = st.slot_of.find(lname);
      if (slot == st.slot_of.end() || st.slots.at(slot->second) != lname) return false;
      for (const auto& f : loc.filenames) {
        if (!st.entry.filenames.count(f)) return false;
        rebuilt.index_add(f, slot->second);
      }
    }
    // Compare ignoring trailing zero words.
    auto trimmed = [](SlotSet s) {
      while (!s.empty() && s.back() == 0) s.pop_back();
      return s;
    };
    if (rebuilt.index.size() != st.index.size()) return false;
    for (auto i = rebuilt.index.cbegin(), j = st.index.cbegin(); i != rebuilt.index.end(); ++i, ++j) {
      if (i->first != j->first || trimmed(i->second) != trimmed(j->second)) return false;
    }
  }
  return true;
}

bool operator==(const Catalog& a, const Catalog& b) {
  if (a.files_ != b.files_ || a.collections_.size() != b.collections_.size()) return false;
  for (auto i = a.collections_.begin(), j = b.collections_.begin(); i != a.collections_.end(); ++i, ++j) {
    if (i->first != j->first || i->second.entry != j->second.entry || i->second.locations != j->second.locations) {
      return false;
    }
  }
  return true;
}

// ---- json ----

json to_json(const Collection& c) {
  return {{"name", c.name},
          {"filenames", std::vector<std::string>(c.filenames.begin(), c.filenames.end())},
          {"attributes", attrs_json(c.attributes)}};
}

json to_json(const Location& l, bool with_filenames) {
  json j = {{"collection", l.collection},
            {"name", l.name},
            {"protocol", l.protocol},
            {"host", l.host},
            {"port", l.port},
            {"path_prefix", l.path_prefix},
            {"attributes", attrs_json(l.attributes)}};
  if (with_filenames) j["filenames"] = std::vector<std::string>(l.filenames.begin(), l.filenames.end());
  return j;
}

json to_json(const LogicalFile& f) {
  return {{"name", f.name}, {"size", f.size}, {"attributes", attrs_json(f.attributes)}};
}

Collection collection_from_json(const json& j) {
  Collection c;
  c.name = j.at("name").get<std::string>();
  for (const auto& f : j.value("filenames", json::array())) c.filenames.insert(f.get<std::string>());
  c.attributes = attrs_from(j.value("attributes", json::object()));
  return c;
}

Location location_from_json(const json& j) {
  Location l;
  l.collection = j.value("collection", std::string{});
  l.name = j.at("name").get<std::string>();
  l.protocol = j.value("protocol", std::string("gftp"));
  l.host = j.at("host").get<std::string>();
  l.port = j.value("port", std::uint16_t{0});
  l.path_prefix = j.value("path_prefix", std::string{});
  for (const auto& f : j.value("filenames", json::array())) l.filenames.insert(f.get<std::string>());
  l.attributes = attrs_from(j.value("attributes", json::object()));
  return l;
}

LogicalFile logical_file_from_json(const json& j) {
  return {j.at("name").get<std::string>(), j.value("size", std::uint64_t{0}),
          attrs_from(j.value("attributes", json::object()))};
}

json Catalog::to_json() const {
  json cols = json::array();
  json locs = json::array();
  for (const auto& [name, st] : collections_) {
    cols.push_back(catalog::to_json(st.entry));
    for (const auto& [lname, loc] : st.locations) locs.push_back(catalog::to_json(loc));
  }
  json files = json::array();
  for (const auto& [name, f] : files_) files.push_back(catalog::to_json(f));
  return {{"collections", cols}, {"locations", locs}, {"lfiles", files}};
}

Catalog Catalog::from_json(const json& j) {
  Catalog c;
  for (const auto& cj : j.at("collections")) {
    auto entry = collection_from_json(cj);
    auto& st = c.collections_[entry.name];
    st.entry = std::move(entry);
  }
  for (const auto& lj : j.at("locations")) {
    auto loc = location_from_json(lj);
    auto& st = c.state(loc.collection);
    const auto slot = st.claim_slot(loc.name);
    for (const auto& f : loc.filenames) st.index_add(f, slot);
    st.locations[loc.name] = std::move(loc);
  }
  for (const auto& fj : j.at("lfiles")) {
    auto f = logical_file_from_json(fj);
    c.files_[f.name] = std::move(f);
  }
  if (!c.subset_invariant_holds()) fail(Errc::CorruptJournal, "snapshot violates the subset invariant");
  return c;
}

// ---- request dispatch ----

bool Catalog::is_mutation(std::string_view op) {
  return op == "create_collection" || op == "delete_collection" || op == "create_location" ||
         op == "delete_location" || op == "create_lfile" || op == "delete_lfile" || op == "attr_add" ||
         op == "attr_delete";
}

json Catalog::apply(const json& request) {
  std::string op;
  json args;
  try {
    op = request.at("op").get<std::string>();
    args = request.value("args", json::object());
  } catch (const json::exception& e) {
    fail(Errc::BadRequest, e.what());
  }
  try {
    if (op == "create_collection") {
      create_collection(args.at("name").get<std::string>());
      return nullptr;
    }
    if (op == "delete_collection") {
      delete_collection(args.at("name").get<std::string>(), args.value("force", false));
      return nullptr;
    }
    if (op == "create_location") {
      Location loc = location_from_json(args);
      loc.collection = args.at("collection").get<std::string>();
      loc.filenames.clear();
      loc.attributes.clear();
      create_location(loc);
      return nullptr;
    }
    if (op == "delete_location") {
      delete_location(args.at("collection").get<std::string>(), args.at("name").get<std::string>());
      return nullptr;
    }
    if (op == "create_lfile") {
      const auto attrs = attrs_from(args.value("attributes", json::object()));
      for (const auto& [k, vs] : attrs) {
        check_name(k);
        for (const auto& v : vs) check_name(v);
      }
      const auto name = args.at("name").get<std::string>();
      create_logical_file(name, args.value("size", std::uint64_t{0}));
      files_[name].attributes = attrs;
      return nullptr;
    }
    if (op == "delete_lfile") {
      delete_logical_file(args.at("name").get<std::string>());
      return nullptr;
    }
    if (op == "attr_add") {
      attr_add(ref_from_json(args.at("entry")), args.at("attr").get<std::string>(), strings(args.value("values", json())));
      return nullptr;
    }
    if (op == "attr_delete") {
      attr_delete(ref_from_json(args.at("entry")), args.at("attr").get<std::string>(),
                  strings(args.value("values", json())));
      return nullptr;
    }
    if (op == "attr_list") {
      return attr_list(ref_from_json(args.at("entry")), args.at("attr").get<std::string>());
    }
    if (op == "list_collection") return catalog::to_json(collection(args.at("name").get<std::string>()));
    if (op == "list_collections") return collection_names();
    if (op == "list_locations") {
      json out = json::array();
      for (const auto& l : locations(args.at("collection").get<std::string>())) out.push_back(catalog::to_json(l));
      return out;
    }
    if (op == "get_location") {
      return catalog::to_json(location(args.at("collection").get<std::string>(), args.at("name").get<std::string>()));
    }
    if (op == "get_lfile") return catalog::to_json(logical_file(args.at("name").get<std::string>()));
    if (op == "find_locations") {
      const auto res = find_locations(args.at("collection").get<std::string>(), strings(args.value("filenames", json())));
      const bool full = args.value("with_filenames", false);
      json locs = json::array();
      for (const auto* l : res.locations) locs.push_back(catalog::to_json(*l, full));
      return {{"locations", locs}, {"unknown", res.unknown}};
    }
    if (op == "url_for") {
      return url_for(args.at("collection").get<std::string>(), args.at("location").get<std::string>(),
                     args.at("filename").get<std::string>());
    }
    if (op == "ping") return "pong";
  } catch (const json::exception& e) {
    fail(Errc::BadRequest, op + ": " + e.what());
  }
  fail(Errc::BadRequest, "unknown op " + op);
}

json LocalHandle::call(const std::string& op, const json& args) {
  if (op == "lock" || op == "unlock") {
    const auto name = args.at("name").get<std::string>();
    const auto me = std::this_thread::get_id();
    std::lock_guard lock(mu_);
    const auto it = locks_.find(name);
    if (op == "lock") {
      if (it != locks_.end() && it->second != me) fail(Errc::Busy, name + " is locked");
      locks_[name] = me;
    } else if (it != locks_.end() && it->second == me) {
      locks_.erase(it);
    }
    return nullptr;
  }
  return store_.execute({{"op", op}, {"args", args}});
}

// ---- typed helpers ----

Collection list_collection(Handle& h, const std::string& name) {
  return collection_from_json(h.call("list_collection", {{"name", name}}));
}

std::vector<Location> find_locations(Handle& h, const std::string& collection,
                                     const std::vector<std::string>& filenames) {
  const auto res = h.call("find_locations", {{"collection", collection}, {"filenames", filenames}});
  std::vector<Location> out;
  for (const auto& l : res.at("locations")) out.push_back(location_from_json(l));
  return out;
}

Location get_location(Handle& h, const std::string& collection, const std::string& name) {
  return location_from_json(h.call("get_location", {{"collection", collection}, {"name", name}}));
}

std::string url_for(Handle& h, const std::string& collection, const std::string& location,
                    const std::string& filename) {
  return h.call("url_for", {{"collection", collection}, {"location", location}, {"filename", filename}})
      .get<std::string>();
}

}  // namespace gftp::catalog
