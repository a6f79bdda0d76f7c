#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>

#include "cods/tensor.hpp"

// CTNS: magic "CTNS", u32 version=1, u32 rank, rank x u64 dims,
// f32 little-endian row-major payload.

static_assert(std::endian::native == std::endian::little,
              "CTNS io assumes a little-endian host");

namespace cods {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

constexpr char kMagic[4] = {'C', 'T', 'N', 'S'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kMaxRank = 8;

}  // namespace

void save_ctns(const std::string& path, const Tensor& t) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw IoError("ctns: cannot open for write: " + path);
  uint32_t rank = static_cast<uint32_t>(t.rank());
  bool ok = std::fwrite(kMagic, 1, 4, f.get()) == 4;
  ok = ok && std::fwrite(&kVersion, sizeof kVersion, 1, f.get()) == 1;
  ok = ok && std::fwrite(&rank, sizeof rank, 1, f.get()) == 1;
  for (int d : t.dims) {
    uint64_t d64 = static_cast<uint64_t>(d);
    ok = ok && std::fwrite(&d64, sizeof d64, 1, f.get()) == 1;
  }
  if (t.numel())
    ok = ok && std::fwrite(t.data(), sizeof(float), t.numel(), f.get()) == t.numel();
  if (!ok) throw IoError("ctns: short write: " + path);
}

Tensor load_ctns(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IoError("ctns: cannot open: " + path);
  char magic[4];
  if (std::fread(magic, 1, 4, f.get()) != 4 ||
      std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("ctns: bad magic: " + path);
  uint32_t version = 0, rank = 0;
  if (std::fread(&version, sizeof version, 1, f.get()) != 1 || version != kVersion)
    throw IoError("ctns: unsupported version: " + path);
  if (std::fread(&rank, sizeof rank, 1, f.get()) != 1 || rank == 0 ||
      rank > kMaxRank)
    throw IoError("ctns: bad rank: " + path);
  std::vector<int> dims(rank);
  uint64_t total = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    uint64_t d = 0;
    if (std::fread(&d, sizeof d, 1, f.get()) != 1 || d == 0 || d > (1u << 30))
      throw IoError("ctns: bad dimension: " + path);
    total *= d;
    if (total > (1ull << 31)) throw IoError("ctns: tensor too large: " + path);
    dims[i] = static_cast<int>(d);
  }
  Tensor t(dims);
  if (std::fread(t.data(), sizeof(float), t.numel(), f.get()) != t.numel())
    throw IoError("ctns: truncated payload: " + path);
  // must be at EOF
  char extra;
  if (std::fread(&extra, 1, 1, f.get()) == 1)
    throw IoError("ctns: trailing bytes: " + path);
  return t;
}

}  // namespace cods
