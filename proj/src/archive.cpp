#include "fedwsidd/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <zlib.h>

#include "fedwsidd/core.hpp"

namespace fedwsidd {

namespace {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    auto b = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto b = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    if (pos_ + n > in_.size()) throw Error(Errc::TruncatedFile, "archive header ends early");
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

std::uint64_t product(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<std::uint8_t> payload_bytes(const NamedTensor& t) {
  std::vector<std::uint8_t> out(t.data.size() * 4);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(t.data[i]);
    for (int b = 0; b < 4; ++b) out[i * 4 + static_cast<std::size_t>(b)] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return out;
}

}  // namespace

std::uint64_t NamedTensor::element_count() const { return product(shape); }

NamedTensor NamedTensor::from_double(std::string name, std::vector<std::uint64_t> shape, std::span<const double> values) {
  NamedTensor t{std::move(name), std::move(shape), {}};
  if (t.element_count() != values.size()) throw Error(Errc::ShapeMismatch, "tensor " + t.name + " shape/data mismatch");
  t.data.assign(values.begin(), values.end());
  return t;
}

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_archive(std::span<const NamedTensor> entries) {
  std::set<std::string> names;
  std::size_t header_size = sizeof(kArchiveMagic) + 4;
  for (const auto& t : entries) {
    if (!names.insert(t.name).second) throw Error(Errc::ConfigInvalid, "duplicate archive entry name " + t.name);
    if (t.element_count() != t.data.size()) throw Error(Errc::ShapeMismatch, "tensor " + t.name + " shape/data mismatch");
    header_size += 4 + t.name.size() + 1 + 4 + 8 * t.shape.size() + 8 + 8 + 4;
  }

  std::vector<std::vector<std::uint8_t>> payloads;
  payloads.reserve(entries.size());
  std::size_t total = header_size;
  for (const auto& t : entries) {
    payloads.push_back(payload_bytes(t));
    total += payloads.back().size();
  }

  std::vector<std::uint8_t> out;
  out.reserve(total);
  Writer w(out);
  w.bytes(kArchiveMagic, sizeof(kArchiveMagic));
  w.u32(static_cast<std::uint32_t>(entries.size()));
  std::uint64_t offset = header_size;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& t = entries[i];
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u8(kDtypeFloat32);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    w.u64(offset);
    w.u64(payloads[i].size());
    w.u32(crc32_of(payloads[i]));
    offset += payloads[i].size();
  }
  for (const auto& p : payloads) w.bytes(p.data(), p.size());
  return out;
}

std::vector<ArchiveEntryHeader> decode_archive_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kArchiveMagic)) throw Error(Errc::TruncatedFile, "archive shorter than its magic tag");
  if (std::memcmp(bytes.data(), kArchiveMagic, sizeof(kArchiveMagic)) != 0) {
    throw Error(Errc::BadMagic, "not an FWSIDD01 archive");
  }
  Reader r(bytes);
  r.take(sizeof(kArchiveMagic));
  const std::uint32_t count = r.u32();
  std::vector<ArchiveEntryHeader> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    ArchiveEntryHeader h;
    const std::uint32_t name_len = r.u32();
    auto name = r.take(name_len);
    h.name.assign(name.begin(), name.end());
    h.dtype = r.u8();
    if (h.dtype != kDtypeFloat32) throw Error(Errc::ManifestSchema, "entry " + h.name + " has unsupported dtype");
    const std::uint32_t rank = r.u32();
    for (std::uint32_t d = 0; d < rank; ++d) h.shape.push_back(r.u64());
    h.offset = r.u64();
    h.length = r.u64();
    h.crc32 = r.u32();
    if (h.length != 4 * product(h.shape)) throw Error(Errc::ManifestSchema, "entry " + h.name + " length/shape mismatch");
    headers.push_back(std::move(h));
  }
  std::uint64_t cursor = r.position();
  for (const auto& h : headers) {
    if (h.offset < cursor) throw Error(Errc::ManifestSchema, "entry " + h.name + " overlaps earlier data");
    if (h.offset + h.length > bytes.size()) throw Error(Errc::TruncatedFile, "payload of " + h.name + " is truncated");
    cursor = h.offset + h.length;
  }
  return headers;
}

std::vector<NamedTensor> decode_archive(std::span<const std::uint8_t> bytes) {
  std::vector<NamedTensor> out;
  for (auto& h : decode_archive_header(bytes)) {
    auto payload = bytes.subspan(h.offset, h.length);
    if (crc32_of(payload) != h.crc32) throw Error(Errc::ChecksumMismatch, "payload of " + h.name + " fails CRC-32");
    NamedTensor t{std::move(h.name), std::move(h.shape), std::vector<float>(h.length / 4)};
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[i * 4 + static_cast<std::size_t>(b)]) << (8 * b);
      t.data[i] = std::bit_cast<float>(bits);
    }
    out.push_back(std::move(t));
  }
  return out;
}

void write_archive(std::span<const NamedTensor> entries, const std::string& path) {
  const auto bytes = encode_archive(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(Errc::Io, "failed writing " + path);
}

std::vector<NamedTensor> read_archive(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::MissingFile, "cannot open archive " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace fedwsidd
