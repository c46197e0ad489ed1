#include <cstdio>
#include <filesystem>
#include <fstream>

#include "gftp/dataplane.hpp"
#include "gftp/errors.hpp"
#include "json.hpp"

namespace gftp::data {

using nlohmann::json;

std::string restart_path_for(const std::string& local_path) { return local_path + ".gftp-restart"; }

void save_restart(const std::string& path, const RestartState& state) {
  json received = json::array();
  for (const auto& r : state.received.intervals()) received.push_back({r.start, r.end});
  json doc = {
      {"url", state.url},
      {"target", {state.target.start, state.target.end}},
      {"received", received},
      {"spec_digest", state.spec_digest},
      {"direction", state.direction},
      {"local_path", state.local_path},
      {"remote_size", state.remote_size},
  };
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) fail(Errc::IoError, "cannot write " + tmp);
    out << doc.dump() << '\n';
    out.flush();
    if (!out) fail(Errc::IoError, "cannot write " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(Errc::IoError, "rename " + tmp + ": " + ec.message());
}

std::optional<RestartState> load_restart(const std::string& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    const auto doc = json::parse(in);
    RestartState st;
    st.url = doc.at("url").get<std::string>();
    st.target = {doc.at("target").at(0).get<std::uint64_t>(), doc.at("target").at(1).get<std::uint64_t>()};
    for (const auto& r : doc.at("received")) {
      st.received.insert(ByteRange{r.at(0).get<std::uint64_t>(), r.at(1).get<std::uint64_t>()});
    }
    st.spec_digest = doc.at("spec_digest").get<std::string>();
    st.direction = doc.value("direction", "get");
    st.local_path = doc.value("local_path", "");
    st.remote_size = doc.value("remote_size", std::uint64_t{0});
    return st;
  } catch (const std::exception& e) {
    fail(Errc::StaleRestart, "unreadable restart file " + path + ": " + e.what());
  }
}

}  // namespace gftp::data
