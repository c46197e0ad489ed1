#include "gftp/range_set.hpp"

#include <algorithm>
#include <iterator>

#include "gftp/errors.hpp"

namespace gftp {

RangeSet::RangeSet(std::initializer_list<ByteRange> ranges) {
  for (const auto& r : ranges) insert(r);
}

void RangeSet::insert(ByteRange r) {
  if (r.start >= r.end) {
    fail(Errc::EmptyInterval, "[" + std::to_string(r.start) + "," + std::to_string(r.end) + ")");
  }
  // First interval whose start is > r.start; step back to a possible left neighbour.
  auto it = map_.upper_bound(r.start);
  if (it != map_.begin()) {
    auto prev = std::prev(it);
    if (prev->second >= r.start) it = prev;
  }
  // Absorb every interval that touches or overlaps [r.start, r.end].
  while (it != map_.end() && it->first <= r.end) {
    r.start = std::min(r.start, it->first);
    r.end = std::max(r.end, it->second);
    total_ -= it->second - it->first;
    it = map_.erase(it);
  }
  map_.emplace(r.start, r.end);
  total_ += r.end - r.start;
}

void RangeSet::insert(const RangeSet& other) {
  for (const auto& [s, e] : other.map_) insert(ByteRange{s, e});
}

void RangeSet::erase(ByteRange r) {
  if (r.empty()) return;
  auto it = map_.upper_bound(r.start);
  if (it != map_.begin()) {
    auto prev = std::prev(it);
    if (prev->second > r.start) it = prev;
  }
  std::vector<ByteRange> keep;
  while (it != map_.end() && it->first < r.end) {
    if (it->first < r.start) keep.push_back({it->first, r.start});
    if (it->second > r.end) keep.push_back({r.end, it->second});
    total_ -= it->second - it->first;
    it = map_.erase(it);
  }
  for (const auto& k : keep) {
    map_.emplace(k.start, k.end);
    total_ += k.length();
  }
}

bool RangeSet::covers(ByteRange r) const {
  if (r.empty()) return true;
  auto it = map_.upper_bound(r.start);
  if (it == map_.begin()) return false;
  --it;
  return it->first <= r.start && it->second >= r.end;
}

bool RangeSet::overlaps(ByteRange r) const {
  if (r.empty()) return false;
  auto it = map_.lower_bound(r.end);
  if (it == map_.begin()) return false;
  --it;
  return it->second > r.start;
}

bool RangeSet::subset_of(ByteRange r) const {
  if (map_.empty()) return true;
  return map_.begin()->first >= r.start && std::prev(map_.end())->second <= r.end;
}

RangeSet RangeSet::intersect(ByteRange r) const {
  RangeSet out;
  if (r.empty()) return out;
  auto it = map_.upper_bound(r.start);
  if (it != map_.begin()) --it;
  for (; it != map_.end() && it->first < r.end; ++it) {
    const auto s = std::max(it->first, r.start);
    const auto e = std::min(it->second, r.end);
    if (s < e) out.insert(ByteRange{s, e});
  }
  return out;
}

RangeSet RangeSet::subtract(const RangeSet& other) const {
  RangeSet out = *this;
  for (const auto& [s, e] : other.map_) out.erase(ByteRange{s, e});
  return out;
}

std::vector<ByteRange> RangeSet::intervals() const {
  std::vector<ByteRange> out;
  out.reserve(map_.size());
  for (const auto& [s, e] : map_) out.push_back({s, e});
  return out;
}

std::uint64_t RangeSet::lower() const { return map_.empty() ? 0 : map_.begin()->first; }

std::uint64_t RangeSet::upper() const { return map_.empty() ? 0 : std::prev(map_.end())->second; }

RangeSet range_insert(RangeSet set, ByteRange r) {
  set.insert(r);
  return set;
}

}  // namespace gftp
