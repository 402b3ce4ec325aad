#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace fedwsidd {

/// Portable tensor archive.
///
/// Layout (all integers little-endian):
///
///   magic        8 bytes  "FWSIDD01"
///   entry_count  u32
///   entries      entry_count times:
///     name_len   u32, followed by name_len bytes of UTF-8
///     dtype      u8   (1 = float32)
///     rank       u32, followed by rank x u64 dimensions
///     offset     u64  absolute byte offset of the payload
///     length     u64  payload byte length (= 4 * product of dimensions)
///     crc32      u32  CRC-32 (zlib polynomial) of the payload bytes
///   payloads     concatenated in entry order, little-endian IEEE-754 float32
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t element_count() const;
  std::vector<double> to_double() const { return {data.begin(), data.end()}; }
  static NamedTensor from_double(std::string name, std::vector<std::uint64_t> shape, std::span<const double> values);

  bool operator==(const NamedTensor&) const = default;
};

inline constexpr char kArchiveMagic[8] = {'F', 'W', 'S', 'I', 'D', 'D', '0', '1'};
inline constexpr std::uint8_t kDtypeFloat32 = 1;

struct ArchiveEntryHeader {
  std::string name;
  std::uint8_t dtype = kDtypeFloat32;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
  std::uint32_t crc32 = 0;
};

std::vector<std::uint8_t> encode_archive(std::span<const NamedTensor> entries);
std::vector<NamedTensor> decode_archive(std::span<const std::uint8_t> bytes);
/// Header only, without touching payloads.
std::vector<ArchiveEntryHeader> decode_archive_header(std::span<const std::uint8_t> bytes);

void write_archive(std::span<const NamedTensor> entries, const std::string& path);
std::vector<NamedTensor> read_archive(const std::string& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

}  // namespace fedwsidd
