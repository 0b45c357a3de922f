// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <limits>

#include "meds/error.hpp"
#include "meds/binary_io.hpp"
#include "test_support.hpp"

namespace meds {
namespace {

TEST(BinaryIo, WriterIsLittleEndian) {
  binio::Writer w;
  w.u16(0x0102);
  w.u32(0x03040506);
  const std::vector<std::uint8_t> expected{0x02, 0x01, 0x06, 0x05, 0x04, 0x03};
  EXPECT_EQ(w.data(), expected);
}

TEST(BinaryIo, RoundTripAllWidths) {
  binio::Writer w;
  w.magic("ABCD");
  w.u8(7);
  w.u16(65535);
  w.u32(123456789);
  w.u64(std::numeric_limits<std::uint64_t>::max() - 3);
  w.f32(1.5f);
  w.f64(-0.1);
  binio::Reader r(w.data(), "blob");
  r.expect_magic("ABCD");
  EXPECT_EQ(r.u8(), 7);
  EXPECT_EQ(r.u16(), 65535);
  EXPECT_EQ(r.u32(), 123456789u);
  EXPECT_EQ(r.u64(), std::numeric_limits<std::uint64_t>::max() - 3);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_EQ(r.f64(), -0.1);
  EXPECT_NO_THROW(r.expect_end());
}

TEST(BinaryIo, TruncationIsParseError) {
  const std::vector<std::uint8_t> bytes{1, 2, 3};
  binio::Reader r(bytes, "blob");
  try {
    r.u32();
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.code(), ParseErrorCode::kTruncated);
    EXPECT_EQ(std::string(e.kind()), "parse.truncated");
  }
}

TEST(BinaryIo, BadMagicAndTrailingBytes) {
  const std::vector<std::uint8_t> bytes{'X', 'Y', 'Z', 'W', 0};
  binio::Reader r(bytes, "blob");
  EXPECT_THROW(r.expect_magic("MEDS"), ParseError);
  binio::Reader r2(bytes, "blob");
  r2.expect_magic("XYZW");
  EXPECT_THROW(r2.expect_end(), ParseError);
}

TEST(BinaryIo, CheckedProductOverflow) {
  EXPECT_EQ(binio::checked_product({3, 4, 5}, "x"), 60u);
  EXPECT_EQ(binio::checked_product({0, std::numeric_limits<std::uint64_t>::max()}, "x"), 0u);
  EXPECT_THROW(binio::checked_product({1ULL << 40, 1ULL << 40}, "x"), ParseError);
}

TEST(BinaryIo, FileRoundTripCreatesParents) {
  const auto dir = testing::scratch_dir("binio");
  const std::vector<std::uint8_t> payload{9, 8, 7};
  binio::write_file(dir / "a" / "b" / "blob.bin", payload);
  EXPECT_EQ(binio::read_file(dir / "a" / "b" / "blob.bin"), payload);
  EXPECT_THROW(binio::read_file(dir / "missing.bin"), IoError);
}

}  // namespace
}  // namespace meds
