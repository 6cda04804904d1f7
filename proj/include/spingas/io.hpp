#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "spingas/errors.hpp"

namespace spingas {

#ifndef SPINGAS_VERSION
#define SPINGAS_VERSION "0.0.0"
#endif

inline constexpr const char* tool_version = SPINGAS_VERSION;

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

// Writes to a sibling temp file and renames over the target, so readers never
// observe a partial file.
inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
  namespace fs = std::filesystem;
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  if (!fs::exists(dir)) throw IoError(fmt::format("output directory does not exist: {}", dir.string()));
  std::random_device rd;
  const fs::path tmp = dir / fmt::format(".{}.tmp.{:08x}", path.filename().string(), rd());
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError(fmt::format("cannot open {} for writing", tmp.string()));
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    os.flush();
    if (!os) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError(fmt::format("write failed: {}", tmp.string()));
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError(fmt::format("cannot rename into {}: {}", path.string(), ec.message()));
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

// Round-trip safe double formatting.
inline std::string fmt_double(double v) { return fmt::format("{:.17g}", v); }

inline double parse_double(const std::string& s) {
  const std::string t = trim(s);
  if (t == "nan" || t == "NaN" || t == "-nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(t, &pos);
  } catch (const std::exception&) {
    throw SchemaError(fmt::format("not a number: '{}'", t));
  }
  if (pos != t.size()) throw SchemaError(fmt::format("not a number: '{}'", t));
  return v;
}

}  // namespace spingas
