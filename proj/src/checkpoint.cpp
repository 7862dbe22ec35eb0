#include "deqff/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace deqff::train {

namespace {

constexpr char kMagic[4] = {'D', 'E', 'Q', 'F'};

struct File {
  std::FILE* f;
  explicit File(std::FILE* f_) : f(f_) {}
  ~File() {
    if (f) std::fclose(f);
  }
};

template <typename T>
void write_pod(std::FILE* f, T v) {
  if (std::fwrite(&v, sizeof(T), 1, f) != 1) throw std::runtime_error("checkpoint: write failed");
}

template <typename T>
T read_pod(std::FILE* f) {
  T v;
  if (std::fread(&v, sizeof(T), 1, f) != 1) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

const ArrayRecord* Container::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return &a;
  return nullptr;
}

void write_container(const std::string& path, const Container& c) {
  File file(std::fopen(path.c_str(), "wb"));
  if (!file.f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  std::FILE* f = file.f;
  if (std::fwrite(kMagic, 1, 4, f) != 4) throw std::runtime_error("checkpoint: write failed");
  write_pod<std::uint32_t>(f, c.version);
  write_pod<std::uint64_t>(f, c.metadata_json.size());
  if (!c.metadata_json.empty() &&
      std::fwrite(c.metadata_json.data(), 1, c.metadata_json.size(), f) != c.metadata_json.size())
    throw std::runtime_error("checkpoint: write failed");
  write_pod<std::uint32_t>(f, std::uint32_t(c.arrays.size()));
  for (const auto& a : c.arrays) {
    write_pod<std::uint32_t>(f, std::uint32_t(a.name.size()));
    if (std::fwrite(a.name.data(), 1, a.name.size(), f) != a.name.size())
      throw std::runtime_error("checkpoint: write failed");
    write_pod<std::uint8_t>(f, 0);  // float64
    write_pod<std::uint8_t>(f, std::uint8_t(a.dims.size()));
    std::uint64_t total = 1;
    for (auto d : a.dims) {
      write_pod<std::uint64_t>(f, d);
      total *= d;
    }
    if (total != a.data.size()) throw std::runtime_error("checkpoint: dims/data mismatch");
    if (total && std::fwrite(a.data.data(), sizeof(double), total, f) != total)
      throw std::runtime_error("checkpoint: write failed");
  }
}

Container read_container(const std::string& path) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file.f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::FILE* f = file.f;
  char magic[4];
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Container c;
  c.version = read_pod<std::uint32_t>(f);
  if (c.version != 1) throw std::runtime_error("checkpoint: unsupported format version");
  auto meta_len = read_pod<std::uint64_t>(f);
  c.metadata_json.resize(meta_len);
  if (meta_len && std::fread(c.metadata_json.data(), 1, meta_len, f) != meta_len)
    throw std::runtime_error("checkpoint: truncated metadata");
  auto count = read_pod<std::uint32_t>(f);
  c.arrays.resize(count);
  for (auto& a : c.arrays) {
    auto name_len = read_pod<std::uint32_t>(f);
    a.name.resize(name_len);
    if (name_len && std::fread(a.name.data(), 1, name_len, f) != name_len)
      throw std::runtime_error("checkpoint: truncated array name");
    auto dtype = read_pod<std::uint8_t>(f);
    if (dtype != 0) throw std::runtime_error("checkpoint: unsupported dtype tag");
    auto rank = read_pod<std::uint8_t>(f);
    a.dims.resize(rank);
    std::uint64_t total = 1;
    for (auto& d : a.dims) {
      d = read_pod<std::uint64_t>(f);
      total *= d;
    }
    a.data.resize(total);
    if (total && std::fread(a.data.data(), sizeof(double), total, f) != total)
      throw std::runtime_error("checkpoint: truncated array data");
  }
  return c;
}

}  // namespace deqff::train
