#pragma once

// Binary array container used for both model checkpoints and dataset caches:
// magic "EMPPCKPT", u32 format version, then repeated records of
// (u32 name length, name bytes, u32 rank, u64 dims, little-endian f64 payload).

#include <bit>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace empp {

static_assert(std::endian::native == std::endian::little,
              "container I/O assumes a little-endian host");

struct ArrayRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (std::uint64_t d : dims) n *= d;
    return n;
  }
};

struct ArrayFile {
  std::uint32_t version = 1;
  std::vector<ArrayRecord> records;

  const ArrayRecord* find(const std::string& name) const {
    for (const ArrayRecord& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

inline constexpr char kContainerMagic[8] = {'E', 'M', 'P', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kContainerVersion = 1;

inline void write_array_file(const std::string& path,
                             const std::vector<ArrayRecord>& records) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(kContainerMagic, 8);
  f.write(reinterpret_cast<const char*>(&kContainerVersion), 4);
  for (const ArrayRecord& r : records) {
    if (r.element_count() != r.data.size())
      throw std::invalid_argument("record " + r.name + ": dims do not match data");
    const std::uint32_t name_len = static_cast<std::uint32_t>(r.name.size());
    f.write(reinterpret_cast<const char*>(&name_len), 4);
    f.write(r.name.data(), name_len);
    const std::uint32_t rank = static_cast<std::uint32_t>(r.dims.size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (std::uint64_t d : r.dims) f.write(reinterpret_cast<const char*>(&d), 8);
    f.write(reinterpret_cast<const char*>(r.data.data()),
            static_cast<std::streamsize>(r.data.size() * 8));
  }
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline ArrayFile read_array_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != std::string(kContainerMagic, 8))
    throw std::runtime_error(path + ": not an array container (bad magic)");
  ArrayFile out;
  f.read(reinterpret_cast<char*>(&out.version), 4);
  if (!f) throw std::runtime_error(path + ": truncated header");
  if (out.version != kContainerVersion)
    throw std::runtime_error(path + ": unsupported container version");
  for (;;) {
    std::uint32_t name_len = 0;
    f.read(reinterpret_cast<char*>(&name_len), 4);
    if (f.eof()) break;
    if (!f || name_len > 4096)
      throw std::runtime_error(path + ": corrupt record header");
    ArrayRecord r;
    r.name.resize(name_len);
    f.read(r.name.data(), name_len);
    std::uint32_t rank = 0;
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || rank > 16) throw std::runtime_error(path + ": corrupt record rank");
    r.dims.resize(rank);
    for (std::uint32_t i = 0; i < rank; ++i)
      f.read(reinterpret_cast<char*>(&r.dims[i]), 8);
    if (!f) throw std::runtime_error(path + ": truncated dims");
    const std::uint64_t count = r.element_count();
    if (count > (1ull << 30))
      throw std::runtime_error(path + ": implausible record size");
    r.data.resize(count);
    f.read(reinterpret_cast<char*>(r.data.data()),
           static_cast<std::streamsize>(count * 8));
    if (!f && !(f.eof() && f.gcount() == static_cast<std::streamsize>(count * 8)))
      throw std::runtime_error(path + ": truncated payload in record " + r.name);
    out.records.push_back(std::move(r));
  }
  return out;
}

}  // namespace empp
