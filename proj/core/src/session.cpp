#include <sys/stat.h>

#include <algorithm>
#include <cctype>

#include "gftp/crypto.hpp"
#include "gftp/errors.hpp"
#include "gftp/server.hpp"

namespace gftp::server {

namespace {

constexpr int kMaxAuthFailures = 3;
constexpr std::uint32_t kMaxParallelism = 64;
constexpr std::uint64_t kMaxSocketBuffer = 64ull << 20;
constexpr Millis kPreambleTimeout{5000};

bool allowed_before_auth(std::string_view verb) {
  return verb == "USER" || verb == "AUTH" || verb == "ADAT" || verb == "QUIT" || verb == "NOOP";
}

bool blocked_during_transfer(std::string_view verb) {
  return verb == "PASV" || verb == "PORT" || verb == "SPAS" || verb == "SPOR" || verb == "REST" ||
         verb == "SBUF" || verb == "OPTS" || verb == "RETR" || verb == "STOR" || verb == "ERET" ||
         verb == "ESTO";
}

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string join_from(const std::vector<std::string>& args, std::size_t first) {
  std::string out;
  for (std::size_t i = first; i < args.size(); ++i) {
    if (!out.empty()) out += ' ';
    out += args[i];
  }
  return out;
}

// Writes through to a file at a fixed shift; sync can be disabled for
// benchmarks that do not need durable markers.
class StoreSink final : public data::BlockSink {
 public:
  StoreSink(data::File& file, std::uint64_t shift, bool sync) : file_(file), shift_(shift), sync_(sync) {}
  void write_at(std::uint64_t offset, std::span<const std::byte> d) override { file_.write_at(offset + shift_, d); }
  void read_at(std::uint64_t offset, std::span<std::byte> out) override { file_.read_at(offset + shift_, out); }
  void sync() override {
    if (sync_) file_.sync();
  }

 private:
  data::File& file_;
  std::uint64_t shift_;
  bool sync_;
};

RangeSet shifted(const RangeSet& set, std::uint64_t shift) {
  if (shift == 0) return set;
  RangeSet out;
  for (const auto& r : set.intervals()) out.insert(ByteRange{r.start + shift, r.end + shift});
  return out;
}

std::string failure_text(const std::exception& e) {
  std::string t = e.what();
  std::replace(t.begin(), t.end(), '\r', ' ');
  std::replace(t.begin(), t.end(), '\n', ' ');
  return t;
}

}  // namespace

std::string_view state_name(SessionState state) {
  switch (state) {
    case SessionState::Connected: return "CONNECTED";
    case SessionState::Authenticating: return "AUTHENTICATING";
    case SessionState::Authenticated: return "AUTHENTICATED";
    case SessionState::Transferring: return "TRANSFERRING";
  }
  return "?";
}

// Internal control connections from a coordinator to its stripe nodes.
class StripeGroup {
 public:
  explicit StripeGroup(const ServerConfig& config) : config_(config) {}

  std::size_t size() const { return config_.stripe_nodes.size(); }

  void connect() {
    if (!nodes_.empty()) return;
    bool ok = false;
    const auto secret = crypto::from_hex(config_.stripe_secret_hex, &ok);
    if (!ok) fail(Errc::AuthFailed, "stripe_secret is not hex");
    std::vector<std::unique_ptr<ControlChannel>> nodes;
    for (const auto& ep : config_.stripe_nodes) {
      auto ch = ControlChannel::connect(ep, Millis{3000});
      ch->authenticate(config_.stripe_user, secret);
      nodes.push_back(std::move(ch));
    }
    nodes_ = std::move(nodes);
  }

  void configure(const data::TransferSpec& spec, const std::optional<std::vector<std::byte>>& token) {
    for (auto& n : nodes_) {
      expect(*n, n->command("OPTS", {"RETR", "Parallelism=" + std::to_string(spec.parallelism) + ";"}), 200);
      if (spec.buffer_size) expect(*n, n->command("SBUF", {std::to_string(spec.buffer_size)}), 200);
      const auto dcau = token ? "S=" + crypto::base64_encode(*token) + ";" : std::string("N;");
      expect(*n, n->command("OPTS", {"DCAU", dcau}), 200);
    }
  }

  std::vector<wire::DataEndpoint> passive() {
    std::vector<wire::DataEndpoint> out;
    for (auto& n : nodes_) {
      const auto r = n->command("PASV");
      expect(*n, r, 227);
      out.push_back(wire::parse_pasv_reply(r));
    }
    return out;
  }

  void active(const std::vector<wire::DataEndpoint>& endpoints) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& ep = endpoints.size() == 1 ? endpoints.front() : endpoints.at(i);
      expect(*nodes_[i], nodes_[i]->command("PORT", {wire::render_host_port(ep)}), 200);
    }
  }

  // Runs the retrieve on every node concurrently; true when all report 226.
  bool retrieve(const std::string& path, std::optional<data::PartialRange> partial, const RangeSet& restart,
                std::size_t block_size, std::string& why) {
    aborted_ = false;
    const auto count = nodes_.size();
    std::vector<int> finals(count, 0);
    std::vector<std::string> errors(count);
    {
      std::vector<std::jthread> threads;
      for (std::size_t k = 0; k < count; ++k) {
        threads.emplace_back([&, k] {
          auto& n = *nodes_[k];
          try {
            expect(n,
                   n.command("OPTS", {"RETR", "StripeIndex=" + std::to_string(k) + ";StripeCount=" +
                                                  std::to_string(count) + ";BlockSize=" +
                                                  std::to_string(block_size) + ";"}),
                   200);
            if (!restart.empty()) expect(n, n.command("REST", {wire::render_range_list(restart)}), 350);
            wire::Reply first = partial ? n.command("ERET", {"P", std::to_string(partial->offset),
                                                             std::to_string(partial->length), path})
                                        : n.command("RETR", {path});
            if (first.code() != 150) {
              finals[k] = first.code();
              errors[k] = first.text();
              return;
            }
            {
              std::lock_guard lock(mu_);
              running_.push_back(&n);
            }
            const auto fin = n.await_final();
            finals[k] = fin.code();
            if (fin.code() != 226) errors[k] = fin.text();
            bool drain = false;
            {
              std::lock_guard lock(mu_);
              running_.erase(std::find(running_.begin(), running_.end(), &n));
              drain = aborted_nodes_.erase(&n) > 0;
            }
            if (drain) n.await_final();  // the node's reply to our ABOR
          } catch (const std::exception& e) {
            finals[k] = 426;
            errors[k] = e.what();
          }
        });
      }
    }
    for (std::size_t k = 0; k < count; ++k) {
      if (finals[k] != 226) {
        why = "stripe " + std::to_string(k) + ": " + errors[k];
        return false;
      }
    }
    return true;
  }

  void abort() {
    std::lock_guard lock(mu_);
    aborted_ = true;
    for (auto* n : running_) {
      if (aborted_nodes_.insert(n).second) {
        try {
          n->send(wire::make_command("ABOR"));
        } catch (const std::exception&) {
        }
      }
    }
  }

 private:
  static void expect(const ControlChannel& n, const wire::Reply& r, int code) {
    if (r.code() != code) {
      fail(Errc::ProtocolError, n.server().to_string() + " replied " + std::to_string(r.code()) + " " + r.text());
    }
  }

  const ServerConfig& config_;
  std::vector<std::unique_ptr<ControlChannel>> nodes_;
  std::mutex mu_;
  std::vector<ControlChannel*> running_;
  std::set<ControlChannel*> aborted_nodes_;
  bool aborted_ = false;
};

Session::Session(ServerContext& context, ReplyFn reply)
    : ctx_(context), reply_(std::move(reply)), cache_(context.config.channel_ttl) {}

Session::~Session() { close(); }

void Session::close() {
  cancel_ = true;
  {
    std::lock_guard lock(mu_);
    if (abort_hook_) abort_hook_();
  }
  join_transfer();
  cache_.clear();
}

SessionState Session::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

std::string Session::identity() const {
  std::lock_guard lock(mu_);
  return identity_;
}

data::TransferSpec Session::pending_spec() const {
  std::lock_guard lock(mu_);
  return spec_;
}

RangeSet Session::restart_point() const {
  std::lock_guard lock(mu_);
  return restart_;
}

void Session::wait_idle() { join_transfer(); }

void Session::reply(int code, std::string text) { reply(wire::Reply(code, std::move(text))); }

void Session::reply(const wire::Reply& r) { reply_(r); }

bool Session::transfer_active() const {
  std::lock_guard lock(mu_);
  return state_ == SessionState::Transferring;
}

void Session::join_transfer() {
  if (transfer_.joinable() && transfer_.get_id() != std::this_thread::get_id()) transfer_.join();
}

void Session::set_abort_hook(std::function<void()> hook) {
  std::lock_guard lock(mu_);
  abort_hook_ = std::move(hook);
}

void Session::finish_transfer(bool ok) {
  (ok ? ctx_.stats.transfers_ok : ctx_.stats.transfers_failed)++;
  std::lock_guard lock(mu_);
  abort_hook_ = nullptr;
  state_ = SessionState::Authenticated;
}

bool Session::handle_line(std::string_view line) {
  wire::Command cmd;
  try {
    cmd = wire::parse_command(line);
  } catch (const Error& e) {
    reply(500, "Syntax error: " + e.detail());
    return true;
  }
  return handle(cmd);
}

bool Session::handle(const wire::Command& cmd) {
  const auto& v = cmd.verb;
  if (!wire::is_supported_verb(v)) {
    reply(500, "Unknown command " + v);
    return true;
  }
  const auto state = this->state();
  if (state < SessionState::Authenticated && !allowed_before_auth(v)) {
    reply(530, "Please authenticate with AUTH HMAC first");
    return true;
  }
  if (state == SessionState::Transferring && blocked_during_transfer(v)) {
    reply(503, "Transfer in progress");
    return true;
  }
  try {
    if (v == "USER") return on_user(cmd);
    if (v == "AUTH") return on_auth(cmd);
    if (v == "ADAT") return on_adat(cmd);
    if (v == "NOOP") {
      reply(200, "OK");
      return true;
    }
    if (v == "QUIT") {
      if (transfer_active()) on_abor_silent();
      reply(221, "Goodbye");
      return false;
    }
    if (v == "PASV") return on_pasv();
    if (v == "PORT") return on_port(cmd);
    if (v == "SPAS") return on_spas();
    if (v == "SPOR") return on_spor(cmd);
    if (v == "REST") return on_rest(cmd);
    if (v == "SBUF") return on_sbuf(cmd);
    if (v == "OPTS") return on_opts(cmd);
    if (v == "SIZE") return on_size(cmd);
    if (v == "CKSM") return on_cksm(cmd);
    if (v == "RETR" || v == "ERET") return on_retrieve(cmd);
    if (v == "STOR" || v == "ESTO") return on_store(cmd);
    if (v == "ABOR") return on_abor();
  } catch (const std::exception& e) {
    reply(451, "Local error: " + failure_text(e));
    return true;
  }
  reply(502, "Not implemented");
  return true;
}

// ---- authentication ----

bool Session::on_user(const wire::Command& cmd) {
  if (cmd.args.size() != 1) {
    reply(501, "USER needs one argument");
    return true;
  }
  std::lock_guard lock(mu_);
  if (state_ >= SessionState::Authenticated) {
    reply(503, "Already authenticated");
    return true;
  }
  user_ = cmd.args[0];
  state_ = SessionState::Connected;
  reply(331, "User name okay, send AUTH HMAC");
  return true;
}

bool Session::on_auth(const wire::Command& cmd) {
  std::lock_guard lock(mu_);
  if (cmd.args.size() != 1 || upper(cmd.args[0]) != "HMAC") {
    reply(504, "Unsupported security mechanism");
    return true;
  }
  if (state_ >= SessionState::Authenticated) {
    reply(503, "Already authenticated");
    return true;
  }
  if (user_.empty()) {
    reply(503, "Send USER first");
    return true;
  }
  nonce_ = crypto::random_bytes(32);
  state_ = SessionState::Authenticating;
  reply(334, "ADAT=" + crypto::base64_encode(nonce_));
  return true;
}

bool Session::on_adat(const wire::Command& cmd) {
  std::unique_lock lock(mu_);
  if (state_ != SessionState::Authenticating) {
    reply(503, "Send AUTH first");
    return true;
  }
  bool ok = false;
  const auto mac = cmd.args.size() == 1 ? crypto::base64_decode(cmd.args[0], &ok) : std::vector<std::byte>{};
  const auto secret = ctx_.secrets.find(user_);
  if (ok && secret && crypto::constant_time_equal(mac, crypto::hmac_sha256(*secret, nonce_))) {
    session_key_ = derive_session_key(*secret, nonce_);
    identity_ = user_;
    state_ = SessionState::Authenticated;
    auth_failures_ = 0;
    reply(235, "Security data exchange complete");
    return true;
  }
  if (++auth_failures_ >= kMaxAuthFailures) {
    reply(535, "Authentication failed; closing connection");
    return false;
  }
  reply(535, "Authentication failed");
  return true;
}

// ---- data path configuration ----

std::optional<std::vector<std::byte>> Session::effective_token() const {
  if (dcau_disabled_) return std::nullopt;
  if (spec_.dcau_token) return spec_.dcau_token;
  return session_key_;
}

data::CacheKey Session::cache_key() const {
  const auto token = effective_token();
  return {data_endpoint_, identity_, token ? crypto::to_hex(*token) : std::string{}};
}

void Session::reset_data_path() {
  cache_.clear();
  listener_.reset();
  mode_ = DataMode::None;
  striped_ = false;
}

bool Session::on_pasv() {
  std::lock_guard lock(mu_);
  reset_data_path();
  const auto& cfg = ctx_.config;
  try {
    listener_ = std::make_shared<net::Listener>(
        net::Listener::bind_in_range(cfg.bind_host, cfg.data_port_low, cfg.data_port_high, spec_.buffer_size));
  } catch (const Error& e) {
    reply(425, "Cannot open data listener: " + e.detail());
    return true;
  }
  mode_ = DataMode::Passive;
  data_endpoint_ = {cfg.data_host, listener_->endpoint().port};
  reply(wire::render_pasv_reply(data_endpoint_));
  return true;
}

bool Session::on_port(const wire::Command& cmd) {
  wire::DataEndpoint ep;
  try {
    if (cmd.args.size() != 1) fail(Errc::MalformedEndpoint, "PORT needs one argument");
    ep = wire::parse_host_port(cmd.args[0]);
  } catch (const Error& e) {
    reply(501, e.detail());
    return true;
  }
  std::lock_guard lock(mu_);
  reset_data_path();
  mode_ = DataMode::Active;
  data_endpoint_ = ep;
  reply(200, "PORT command successful");
  return true;
}

bool Session::on_spas() {
  if (ctx_.config.stripe_nodes.empty()) {
    // A plain server is a one-stripe set.
    std::lock_guard lock(mu_);
    reset_data_path();
    const auto& cfg = ctx_.config;
    try {
      listener_ = std::make_shared<net::Listener>(
          net::Listener::bind_in_range(cfg.bind_host, cfg.data_port_low, cfg.data_port_high, spec_.buffer_size));
    } catch (const Error& e) {
      reply(425, "Cannot open data listener: " + e.detail());
      return true;
    }
    mode_ = DataMode::Passive;
    data_endpoint_ = {cfg.data_host, listener_->endpoint().port};
    reply(wire::render_spas_reply({data_endpoint_}));
    return true;
  }
  std::lock_guard lock(mu_);
  reset_data_path();
  try {
    if (!stripes_) stripes_ = std::make_unique<StripeGroup>(ctx_.config);
    stripes_->connect();
    stripes_->configure(spec_, effective_token());
    const auto endpoints = stripes_->passive();
    striped_ = true;
    reply(wire::render_spas_reply(endpoints));
  } catch (const std::exception& e) {
    stripes_.reset();
    reply(425, "Stripe node unavailable: " + failure_text(e));
  }
  return true;
}

bool Session::on_spor(const wire::Command& cmd) {
  std::vector<wire::DataEndpoint> endpoints;
  try {
    for (const auto& a : cmd.args) endpoints.push_back(wire::parse_host_port(a));
  } catch (const Error& e) {
    reply(501, e.detail());
    return true;
  }
  const auto nodes = ctx_.config.stripe_nodes.size();
  if (endpoints.empty() || (nodes == 0 && endpoints.size() != 1) ||
      (nodes > 0 && endpoints.size() != 1 && endpoints.size() != nodes)) {
    reply(501, "SPOR endpoint count does not match stripe count");
    return true;
  }
  std::lock_guard lock(mu_);
  reset_data_path();
  if (nodes == 0) {
    mode_ = DataMode::Active;
    data_endpoint_ = endpoints.front();
    reply(200, "SPOR command successful");
    return true;
  }
  try {
    if (!stripes_) stripes_ = std::make_unique<StripeGroup>(ctx_.config);
    stripes_->connect();
    stripes_->configure(spec_, effective_token());
    stripes_->active(endpoints);
    striped_ = true;
    reply(200, "SPOR command successful");
  } catch (const std::exception& e) {
    stripes_.reset();
    reply(425, "Stripe node unavailable: " + failure_text(e));
  }
  return true;
}

bool Session::on_rest(const wire::Command& cmd) {
  if (cmd.args.size() != 1) {
    reply(501, "REST needs one argument");
    return true;
  }
  RangeSet point;
  if (const auto n = wire::parse_u64(cmd.args[0])) {
    if (*n > 0) point.insert(ByteRange{0, *n});
  } else {
    try {
      point = wire::parse_range_list(cmd.args[0]);
    } catch (const Error& e) {
      reply(501, "Bad restart marker: " + e.detail());
      return true;
    }
  }
  std::lock_guard lock(mu_);
  restart_ = point;
  reply(350, "Restarting at " + cmd.args[0] + ". Send transfer command");
  return true;
}

bool Session::on_sbuf(const wire::Command& cmd) {
  const auto n = cmd.args.size() == 1 ? wire::parse_u64(cmd.args[0]) : std::nullopt;
  if (!n || *n == 0 || *n > kMaxSocketBuffer) {
    reply(501, "SBUF needs a buffer size between 1 and 67108864");
    return true;
  }
  std::lock_guard lock(mu_);
  spec_.buffer_size = static_cast<std::size_t>(*n);
  reply(200, "Buffer size set to " + std::to_string(*n));
  return true;
}

bool Session::on_opts(const wire::Command& cmd) {
  if (cmd.args.size() < 2) {
    reply(501, "OPTS needs a command and options");
    return true;
  }
  const auto target = upper(cmd.args[0]);
  const auto body = join_from(cmd.args, 1);
  std::lock_guard lock(mu_);
  if (target == "DCAU") {
    auto value = body;
    if (!value.empty() && value.back() == ';') value.pop_back();
    if (value == "N") {
      dcau_disabled_ = true;
      spec_.dcau_token.reset();
    } else if (value == "A") {
      dcau_disabled_ = false;
      spec_.dcau_token.reset();
    } else if (value.rfind("S=", 0) == 0) {
      bool ok = false;
      auto token = crypto::base64_decode(value.substr(2), &ok);
      if (!ok || token.empty()) {
        reply(501, "Bad DCAU token");
        return true;
      }
      dcau_disabled_ = false;
      spec_.dcau_token = std::move(token);
    } else {
      reply(501, "DCAU expects N, A or S=<token>");
      return true;
    }
    reply(200, "DCAU set");
    return true;
  }
  if (target != "RETR") {
    reply(501, "Unsupported OPTS target");
    return true;
  }
  auto spec = spec_;
  auto stripe_index = stripe_index_;
  auto stripe_count = stripe_count_;
  for (auto item : wire::split(body, ';')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    const auto key = item.substr(0, eq);
    const auto value = eq == std::string_view::npos ? std::nullopt : wire::parse_u64(item.substr(eq + 1));
    if (!value) {
      reply(501, "Bad option " + std::string(item));
      return true;
    }
    if (key == "Parallelism" && *value >= 1 && *value <= kMaxParallelism) {
      spec.parallelism = static_cast<std::uint32_t>(*value);
    } else if (key == "StripeIndex") {
      stripe_index = static_cast<std::size_t>(*value);
    } else if (key == "StripeCount" && *value >= 1) {
      stripe_count = static_cast<std::size_t>(*value);
    } else if (key == "BlockSize" && *value >= wire::kMinBlockSize && *value <= ctx_.config.max_block) {
      spec.block_size = static_cast<std::size_t>(*value);
    } else {
      reply(501, "Bad option " + std::string(item));
      return true;
    }
  }
  if (stripe_index && *stripe_index >= stripe_count) {
    reply(501, "StripeIndex must be below StripeCount");
    return true;
  }
  spec_ = spec;
  stripe_index_ = stripe_index;
  stripe_count_ = stripe_count;
  reply(200, "OPTS command successful");
  return true;
}

// ---- file queries ----

std::optional<std::filesystem::path> Session::resolve(const std::string& path) const {
  if (path.empty()) return std::nullopt;
  std::filesystem::path rel = std::filesystem::path(path).relative_path();
  for (const auto& part : rel) {
    if (part == "..") return std::nullopt;
  }
  if (rel.empty()) return std::nullopt;
  return (ctx_.config.root / rel).lexically_normal();
}

namespace {
std::optional<std::uint64_t> regular_file_size(const std::filesystem::path& p) {
  struct stat st {};
  if (::stat(p.c_str(), &st) != 0 || !S_ISREG(st.st_mode)) return std::nullopt;
  return static_cast<std::uint64_t>(st.st_size);
}
}  // namespace

bool Session::on_size(const wire::Command& cmd) {
  const auto p = cmd.args.size() == 1 ? resolve(cmd.args[0]) : std::nullopt;
  const auto size = p ? regular_file_size(*p) : std::nullopt;
  if (!size) {
    reply(550, "No such file");
    return true;
  }
  reply(213, std::to_string(*size));
  return true;
}

bool Session::on_cksm(const wire::Command& cmd) {
  if (cmd.args.size() != 4) {
    reply(501, "CKSM SHA256 <offset> <length> <path>");
    return true;
  }
  if (upper(cmd.args[0]) != "SHA256") {
    reply(504, "Unsupported checksum algorithm");
    return true;
  }
  const auto off = wire::parse_u64(cmd.args[1]);
  const auto len = wire::parse_u64(cmd.args[2]);
  const auto p = resolve(cmd.args[3]);
  const auto size = p ? regular_file_size(*p) : std::nullopt;
  if (!off || !len) {
    reply(501, "Bad checksum range");
    return true;
  }
  if (!size) {
    reply(550, "No such file");
    return true;
  }
  if (*off > *size || *len > *size - *off) {
    reply(551, "Range out of bounds");
    return true;
  }
  reply(213, crypto::to_hex(crypto::file_sha256(p->string(), *off, *len)));
  return true;
}

// ---- transfers ----

bool Session::on_retrieve(const wire::Command& cmd) {
  const bool eret = cmd.verb == "ERET";
  std::optional<data::PartialRange> partial;
  std::string path;
  if (eret) {
    if (cmd.args.size() != 4) {
      reply(501, "ERET P <offset> <length> <path>");
      return true;
    }
    if (upper(cmd.args[0]) != "P") {
      reply(504, "Unsupported ERET module");
      return true;
    }
    const auto off = wire::parse_u64(cmd.args[1]);
    const auto len = wire::parse_u64(cmd.args[2]);
    if (!off || !len || *off > UINT64_MAX - *len) {
      reply(501, "Bad ERET range");
      return true;
    }
    partial = data::PartialRange{*off, *len};
    path = cmd.args[3];
  } else {
    if (cmd.args.size() != 1) {
      reply(501, "RETR needs a path");
      return true;
    }
    path = cmd.args[0];
  }
  const auto file = resolve(path);
  const auto size = file ? regular_file_size(*file) : std::nullopt;
  if (!size) {
    reply(550, "No such file");
    return true;
  }
  ByteRange range{0, *size};
  if (partial) {
    if (partial->offset + partial->length > *size) {
      reply(551, "Requested range exceeds file size");
      return true;
    }
    range = {partial->offset, partial->offset + partial->length};
  }

  std::unique_lock lock(mu_);
  RangeSet restart = std::exchange(restart_, RangeSet{});
  const bool striped = striped_ && stripes_;
  if (!striped && mode_ == DataMode::None) {
    reply(425, "Use PASV or PORT first");
    return true;
  }
  RangeSet ranges;
  if (!range.empty()) ranges.insert(range);
  ranges = ranges.subtract(restart);
  state_ = SessionState::Transferring;
  cancel_ = false;
  lock.unlock();

  join_transfer();
  reply(150, "Opening data channels");
  if (striped) {
    transfer_ = std::jthread([this, path, partial, restart] { run_striped_retrieve(path, partial, restart); });
  } else {
    transfer_ = std::jthread([this, f = *file, ranges] { run_retrieve(f, ranges); });
  }
  return true;
}

std::vector<data::ChannelPtr> Session::open_send_channels(std::size_t want) {
  data::CacheKey key;
  DataMode mode;
  std::shared_ptr<net::Listener> listener;
  wire::DataEndpoint endpoint;
  std::optional<std::vector<std::byte>> token;
  std::size_t buffer = 0;
  {
    std::lock_guard lock(mu_);
    key = cache_key();
    mode = mode_;
    listener = listener_;
    endpoint = data_endpoint_;
    token = effective_token();
    buffer = spec_.buffer_size;
  }
  std::vector<data::ChannelPtr> out;
  if (auto cached = cache_.checkout(key)) out = std::move(*cached);
  const auto& cfg = ctx_.config;
  const auto deadline = data::Clock::now() + cfg.data_stall_timeout;
  while (out.size() < want) {
    if (cancel_) fail(Errc::Cancelled, "aborted");
    if (mode == DataMode::Passive && listener) {
      auto s = listener->accept(Millis{100});
      if (!s) {
        if (data::Clock::now() > deadline) {
          if (out.empty()) fail(Errc::Timeout, "no data connection arrived");
          break;
        }
        continue;
      }
      if (buffer) s->set_buffer_size(buffer);
      auto ch = std::make_unique<data::DataChannel>(std::move(*s), cfg.max_block);
      try {
        if (token) ch->expect_preamble(*token, kPreambleTimeout);
      } catch (const Error& e) {
        // A peer that vanished before authenticating is skipped; a wrong token is fatal.
        if (e.code() == Errc::DcauMismatch) throw;
        continue;
      }
      ++ctx_.stats.data_accepts;
      out.push_back(std::move(ch));
    } else if (mode == DataMode::Active) {
      auto ch = std::make_unique<data::DataChannel>(net::Socket::connect(endpoint, Millis{5000}, buffer), cfg.max_block);
      if (token) ch->write_preamble(*token);
      ++ctx_.stats.data_connects;
      out.push_back(std::move(ch));
    } else {
      fail(Errc::ConnectFailure, "no data path configured");
    }
  }
  return out;
}

void Session::run_retrieve(std::filesystem::path file, RangeSet ranges) {
  bool ok = false;
  std::string why;
  try {
    data::File source(file.string(), data::File::Mode::Read);
    data::TransferSpec spec;
    std::optional<std::size_t> stripe_index;
    std::size_t stripe_count = 1;
    data::CacheKey key;
    {
      std::lock_guard lock(mu_);
      spec = spec_;
      stripe_index = stripe_index_;
      stripe_count = stripe_count_;
      key = cache_key();
    }
    auto channels = open_send_channels(spec.parallelism);
    std::vector<data::DataChannel*> ptrs;
    for (auto& c : channels) ptrs.push_back(c.get());
    set_abort_hook([&] {
      for (auto* c : ptrs) c->shutdown();
    });

    data::SendOptions opts;
    opts.cancel = &cancel_;
    std::vector<ByteRange> blocks;
    if (stripe_index) {
      blocks = data::StripePlan{stripe_count, spec.block_size}.blocks_for(*stripe_index, ranges);
      opts.eof = *stripe_index == 0 ? data::SendOptions::Eof::Fixed : data::SendOptions::Eof::None;
      opts.eof_count = static_cast<std::uint64_t>(stripe_count) * spec.parallelism;
    } else {
      blocks = data::plan_blocks(ranges, spec.block_size);
    }
    try {
      const auto report = data::send_range(ptrs, std::move(blocks), source, opts);
      ctx_.stats.payload_sent += report.payload_bytes();
      std::vector<data::ChannelPtr> keep;
      for (std::size_t i = 0; i < channels.size(); ++i) {
        if (!report.channels[i].failed) keep.push_back(std::move(channels[i]));
      }
      set_abort_hook(nullptr);
      cache_.checkin(key, std::move(keep));
      ok = true;
    } catch (...) {
      set_abort_hook(nullptr);
      throw;
    }
  } catch (const std::exception& e) {
    set_abort_hook(nullptr);
    why = failure_text(e);
  }
  if (ok) {
    reply(226, "Transfer complete");
  } else {
    reply(426, "Transfer failed: " + why);
  }
  finish_transfer(ok);
}

void Session::run_striped_retrieve(std::string path, std::optional<data::PartialRange> partial, RangeSet restart) {
  std::string why;
  std::size_t block_size = 0;
  {
    std::lock_guard lock(mu_);
    block_size = spec_.block_size;
  }
  set_abort_hook([this] { stripes_->abort(); });
  bool ok = false;
  try {
    ok = stripes_->retrieve(path, partial, restart, block_size, why);
  } catch (const std::exception& e) {
    why = failure_text(e);
  }
  set_abort_hook(nullptr);
  if (cancel_) ok = false;
  if (ok) {
    reply(226, "Striped transfer complete");
  } else {
    reply(426, "Striped transfer failed: " + why);
  }
  finish_transfer(ok);
}

bool Session::on_store(const wire::Command& cmd) {
  const bool esto = cmd.verb == "ESTO";
  std::uint64_t shift = 0;
  std::string path;
  if (esto) {
    if (cmd.args.size() != 3) {
      reply(501, "ESTO A <offset> <path>");
      return true;
    }
    if (upper(cmd.args[0]) != "A") {
      reply(504, "Unsupported ESTO module");
      return true;
    }
    const auto off = wire::parse_u64(cmd.args[1]);
    if (!off) {
      reply(501, "Bad ESTO offset");
      return true;
    }
    shift = *off;
    path = cmd.args[2];
  } else {
    if (cmd.args.size() != 1) {
      reply(501, "STOR needs a path");
      return true;
    }
    path = cmd.args[0];
  }
  const auto file = resolve(path);
  if (!file) {
    reply(553, "File name not allowed");
    return true;
  }
  std::error_code ec;
  std::filesystem::create_directories(file->parent_path(), ec);

  std::unique_lock lock(mu_);
  if (striped_) {
    reply(504, "Striped stores are not supported");
    return true;
  }
  if (mode_ == DataMode::None) {
    reply(425, "Use PASV or PORT first");
    return true;
  }
  RangeSet restart = std::exchange(restart_, RangeSet{});
  const bool truncate = !esto && restart.empty();
  try {
    data::File probe(file->string(), data::File::Mode::Write);
  } catch (const Error& e) {
    reply(553, "Cannot open destination: " + e.detail());
    return true;
  }
  state_ = SessionState::Transferring;
  cancel_ = false;
  lock.unlock();

  join_transfer();
  reply(150, "Opening data channels");
  transfer_ = std::jthread([this, f = *file, restart, shift, truncate] { run_store(f, restart, shift, truncate); });
  return true;
}

void Session::run_store(std::filesystem::path file, RangeSet restart, std::uint64_t shift, bool truncate) {
  bool ok = false;
  bool dcau_failed = false;
  std::string why;
  const auto& cfg = ctx_.config;
  try {
    data::File out(file.string(), truncate ? data::File::Mode::WriteTruncate : data::File::Mode::Write);
    StoreSink sink(out, shift, cfg.sync_markers);
    data::TransferSpec spec;
    data::CacheKey key;
    DataMode mode;
    std::shared_ptr<net::Listener> listener;
    wire::DataEndpoint endpoint;
    std::optional<std::vector<std::byte>> token;
    {
      std::lock_guard lock(mu_);
      spec = spec_;
      key = cache_key();
      mode = mode_;
      listener = listener_;
      endpoint = data_endpoint_;
      token = effective_token();
    }

    data::TransferProgress progress;
    progress.open_ended = true;
    progress.target = {0, UINT64_MAX};
    progress.received = restart;
    data::Receiver receiver(progress, sink);

    data::ReceiveOptions ro;
    ro.idle_grace = cfg.data_idle_grace;
    ro.stall_timeout = cfg.data_stall_timeout;
    ro.checkpoint_bytes = cfg.marker_bytes;
    ro.checkpoint_interval = cfg.marker_interval;
    ro.cancel = &cancel_;
    ro.on_checkpoint = [&](const data::TransferProgress& p) {
      if (p.received.empty()) return;
      reply(111, wire::render_range_marker(shifted(p.received, shift)));
      ++ctx_.stats.markers_sent;
    };
    data::ReceiveTransfer rt(receiver, ro);
    set_abort_hook([&rt] { rt.abort(); });

    if (auto cached = cache_.checkout(key)) {
      for (auto& c : *cached) rt.add_channel(std::move(c));
    }
    std::atomic<bool> done{false};
    std::jthread acceptor;
    if (mode == DataMode::Passive && listener) {
      acceptor = std::jthread([&] {
        while (!done) {
          auto s = listener->accept(Millis{100});
          if (!s) continue;
          if (spec.buffer_size) s->set_buffer_size(spec.buffer_size);
          auto ch = std::make_unique<data::DataChannel>(std::move(*s), cfg.max_block);
          try {
            if (token) ch->expect_preamble(*token, kPreambleTimeout);
          } catch (const Error& e) {
            if (e.code() != Errc::DcauMismatch) continue;
            dcau_failed = true;
            rt.abort();
            return;
          }
          ++ctx_.stats.data_accepts;
          rt.add_channel(std::move(ch));
        }
      });
    } else if (mode == DataMode::Active) {
      for (std::uint32_t i = 0; i < spec.parallelism; ++i) {
        auto ch = std::make_unique<data::DataChannel>(net::Socket::connect(endpoint, Millis{5000}, spec.buffer_size),
                                                      cfg.max_block);
        if (token) ch->write_preamble(*token);
        ++ctx_.stats.data_connects;
        rt.add_channel(std::move(ch));
      }
    }
    ok = rt.wait();
    done = true;
    if (acceptor.joinable()) acceptor.join();
    set_abort_hook(nullptr);
    ctx_.stats.payload_received += receiver.payload_bytes();
    if (ok) {
      cache_.checkin(key, rt.take_reusable());
    } else if (auto err = rt.error()) {
      why = *err;
    } else if (cancel_) {
      why = "aborted";
    } else {
      why = "data channels closed before transfer completed";
    }
  } catch (const std::exception& e) {
    set_abort_hook(nullptr);
    why = failure_text(e);
  }
  if (ok) {
    reply(226, "Transfer complete");
  } else if (dcau_failed) {
    reply(426, "Data channel authentication failed");
  } else if (why.find("No space") != std::string::npos) {
    reply(552, "Storage full: " + why);
  } else {
    reply(426, "Transfer incomplete: " + why);
  }
  finish_transfer(ok);
}

bool Session::on_abor() {
  if (!transfer_active()) {
    join_transfer();
    reply(226, "No transfer to abort");
    return true;
  }
  on_abor_silent();
  reply(226, "Abort successful");
  return true;
}

void Session::on_abor_silent() {
  cancel_ = true;
  {
    std::lock_guard lock(mu_);
    if (abort_hook_) abort_hook_();
  }
  join_transfer();
}

}  // namespace gftp::server
