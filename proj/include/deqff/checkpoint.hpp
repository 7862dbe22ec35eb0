#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace deqff::train {

// Little-endian container: magic "DEQF", u32 format version, u64 metadata
// length + UTF-8 JSON metadata, u32 array count, then per array:
// u32 name length, name bytes, u8 dtype tag (0 = float64), u8 rank,
// u64 dims[rank], raw data.
struct ArrayRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};

struct Container {
  std::uint32_t version = 1;
  std::string metadata_json;
  std::vector<ArrayRecord> arrays;

  const ArrayRecord* find(const std::string& name) const;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path);

}  // namespace deqff::train
