#include "gftp/dataplane.hpp"

namespace gftp::data {

ChannelCache::ChannelCache(Millis ttl, ClockFn clock) : ttl_(ttl), clock_(std::move(clock)) {}

std::optional<std::vector<ChannelPtr>> ChannelCache::checkout(const CacheKey& key) {
  std::vector<ChannelPtr> expired;  // closed after the lock is released
  std::optional<std::vector<ChannelPtr>> found;
  {
    std::lock_guard lock(mu_);
    const auto now = clock_();
    auto [lo, hi] = entries_.equal_range(key);
    for (auto it = lo; it != hi;) {
      if (it->second.deadline <= now) {
        for (auto& c : it->second.channels) expired.push_back(std::move(c));
        it = entries_.erase(it);
        continue;
      }
      if (!found) {
        found = std::move(it->second.channels);
        it = entries_.erase(it);
        continue;
      }
      ++it;
    }
  }
  return found;
}

void ChannelCache::checkin(const CacheKey& key, std::vector<ChannelPtr> channels, std::optional<Millis> ttl) {
  if (channels.empty()) return;
  std::lock_guard lock(mu_);
  entries_.emplace(key, Entry{std::move(channels), clock_() + ttl.value_or(ttl_)});
}

std::size_t ChannelCache::purge() {
  std::vector<ChannelPtr> expired;
  std::size_t dropped = 0;
  {
    std::lock_guard lock(mu_);
    const auto now = clock_();
    for (auto it = entries_.begin(); it != entries_.end();) {
      if (it->second.deadline <= now) {
        for (auto& c : it->second.channels) expired.push_back(std::move(c));
        it = entries_.erase(it);
        ++dropped;
      } else {
        ++it;
      }
    }
  }
  return dropped;
}

void ChannelCache::clear() {
  std::multimap<CacheKey, Entry> doomed;
  std::lock_guard lock(mu_);
  doomed.swap(entries_);
}

std::size_t ChannelCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

}  // namespace gftp::data
