#include "blab/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace blab {

namespace {

constexpr char kMagic[4] = {'B', 'L', 'A', 'B'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  write_pod<uint32_t>(os, kVersion);
  write_pod<uint32_t>(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (name.size() > 0xffff) fail("checkpoint: name too long: " + name);
    write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(os, static_cast<uint8_t>(t->rank()));
    for (int i = 0; i < t->rank(); ++i)
      write_pod<uint32_t>(os, static_cast<uint32_t>(t->dim(i)));
    os.write(reinterpret_cast<const char*>(t->data()),
             static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t->numel())));
  }
  if (!os) fail("checkpoint: write failed: " + path);
}

std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    fail("checkpoint: bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kVersion) fail("checkpoint: unsupported version in " + path);
  uint32_t count = read_pod<uint32_t>(is);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    uint16_t len = read_pod<uint16_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    uint8_t rank = read_pod<uint8_t>(is);
    std::vector<int> shape(rank);
    for (uint8_t i = 0; i < rank; ++i)
      shape[i] = static_cast<int>(read_pod<uint32_t>(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    if (!is) fail("checkpoint: truncated tensor data in " + path);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace blab
