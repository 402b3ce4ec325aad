#include "doctest.h"

#include <cstring>
#include <filesystem>

#include "fedwsidd/archive.hpp"
#include "fedwsidd/core.hpp"

using namespace fedwsidd;

namespace {

std::vector<NamedTensor> sample() {
  std::vector<NamedTensor> t(2);
  t[0].name = "a";
  t[0].shape = {2, 3};
  t[0].data = {0, 1, 2, 3, 4, 5.5f};
  t[1].name = "synthetic|C1|x";
  t[1].shape = {1};
  t[1].data = {-1.25f};
  return t;
}

}  // namespace

TEST_CASE("crc32 check value") {
  const char* s = "123456789";
  CHECK(crc32_of({reinterpret_cast<const std::uint8_t*>(s), 9}) == 0xCBF43926u);
}

TEST_CASE("archive layout") {
  const auto bytes = encode_archive(sample());
  REQUIRE(bytes.size() > 12);
  CHECK(std::memcmp(bytes.data(), kArchiveMagic, 8) == 0);
  CHECK(bytes[8] == 2);  // entry count, little-endian
  CHECK(bytes[9] == 0);
  const auto headers = decode_archive_header(bytes);
  REQUIRE(headers.size() == 2u);
  CHECK(headers[0].length == 24u);
  CHECK(headers[1].offset == headers[0].offset + 24);
  CHECK(headers[1].offset + headers[1].length == bytes.size());
  // first payload float is 0.0f, the sixth 5.5f
  float last;
  std::memcpy(&last, bytes.data() + headers[0].offset + 20, 4);
  CHECK(last == 5.5f);
}

TEST_CASE("archive round trip") {
  const auto t = sample();
  CHECK(decode_archive(encode_archive(t)) == t);
  const auto path = (std::filesystem::temp_directory_path() / "fedwsidd_archive_test.fwsa").string();
  write_archive(t, path);
  CHECK(read_archive(path) == t);
  std::filesystem::remove(path);
}

TEST_CASE("archive corruption is detected") {
  auto bytes = encode_archive(sample());
  SUBCASE("payload flip") {
    bytes.back() ^= 0x40;
    try {
      decode_archive(bytes);
      FAIL("no throw");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::ChecksumMismatch);
    }
  }
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    try {
      decode_archive(bytes);
      FAIL("no throw");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::BadMagic);
    }
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 3);
    try {
      decode_archive(bytes);
      FAIL("no throw");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::TruncatedFile);
    }
  }
}

TEST_CASE("missing archive file") {
  try {
    read_archive("/nonexistent/x.fwsa");
    FAIL("no throw");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::MissingFile);
  }
}

TEST_CASE("shape and data must agree") {
  NamedTensor t;
  t.name = "bad";
  t.shape = {3};
  t.data = {1, 2};
  std::vector<NamedTensor> v = {t};
  CHECK_THROWS_AS(encode_archive(v), Error);
}
