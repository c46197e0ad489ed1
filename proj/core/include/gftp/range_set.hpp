#pragma once

#include <cstdint>
#include <initializer_list>
#include <map>
#include <string>
#include <vector>

namespace gftp {

// Half-open byte interval [start, end).
struct ByteRange {
  std::uint64_t start = 0;
  std::uint64_t end = 0;

  std::uint64_t length() const noexcept { return end > start ? end - start : 0; }
  bool empty() const noexcept { return start >= end; }
  bool contains(std::uint64_t offset) const noexcept { return start <= offset && offset < end; }

  friend bool operator==(const ByteRange&, const ByteRange&) = default;
};

// Sorted, disjoint, maximally coalesced set of byte intervals. Tracks which
// parts of a file have been received and backs the restart markers.
class RangeSet {
 public:
  RangeSet() = default;
  RangeSet(std::initializer_list<ByteRange> ranges);

  // Throws Error(EmptyInterval) when r.start >= r.end.
  void insert(ByteRange r);
  void insert(const RangeSet& other);
  void erase(ByteRange r);

  bool empty() const noexcept { return map_.empty(); }
  std::size_t interval_count() const noexcept { return map_.size(); }
  std::uint64_t total_bytes() const noexcept { return total_; }

  // True when every byte of r is in the set. Empty r is always covered.
  bool covers(ByteRange r) const;
  bool overlaps(ByteRange r) const;
  bool subset_of(ByteRange r) const;

  RangeSet intersect(ByteRange r) const;
  RangeSet subtract(const RangeSet& other) const;

  std::vector<ByteRange> intervals() const;
  // Lowest start / highest end; zero when empty.
  std::uint64_t lower() const;
  std::uint64_t upper() const;

  friend bool operator==(const RangeSet& a, const RangeSet& b) { return a.map_ == b.map_; }

 private:
  std::map<std::uint64_t, std::uint64_t> map_;  // start -> end
  std::uint64_t total_ = 0;
};

// Functional form: returns set ∪ [r.start, r.end).
RangeSet range_insert(RangeSet set, ByteRange r);

}  // namespace gftp
