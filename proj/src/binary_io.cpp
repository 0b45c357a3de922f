// SPDX-License-Identifier: Apache-2.0

#include "meds/binary_io.hpp"

#include <fstream>
#include <iterator>
#include <limits>

namespace meds {

const char* to_string(ParseErrorCode code) noexcept {
  switch (code) {
    case ParseErrorCode::kBadMagic: return "bad-magic";
    case ParseErrorCode::kVersionMismatch: return "version-mismatch";
    case ParseErrorCode::kTruncated: return "truncated";
    case ParseErrorCode::kDimensionOverflow: return "dimension-overflow";
    case ParseErrorCode::kMalformed: return "malformed";
  }
  return "unknown";
}

namespace binio {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

std::uint64_t checked_product(std::initializer_list<std::uint64_t> dims, const std::string& what) {
  std::uint64_t total = 1;
  for (std::uint64_t d : dims) {
    if (d != 0 && total > std::numeric_limits<std::uint64_t>::max() / d) {
      throw ParseError(ParseErrorCode::kDimensionOverflow, what + ": dimension product overflows");
    }
    total *= d;
  }
  return total;
}

}  // namespace binio
}  // namespace meds
