#include "bevkd/util.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace bevkd {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

static void rename_into_place(const std::filesystem::path& tmp, const std::filesystem::path& path) {
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw Error(ErrorKind::kRuntime, "failed to move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

void atomic_write_file(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::kRuntime, "cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error(ErrorKind::kRuntime, "short write to " + tmp.string());
  }
  rename_into_place(tmp, path);
}

void atomic_write_binary(const std::filesystem::path& path, const std::vector<char>& bytes) {
  atomic_write_file(path, std::string(bytes.begin(), bytes.end()));
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kMissingArtifact, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string iso8601_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return std::string(buf);
}

CsvWriter::CsvWriter(std::vector<std::string> columns) : columns_(std::move(columns)) {}

void CsvWriter::add_row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_.size())
    throw Error(ErrorKind::kRuntime, "csv row width mismatch");
  rows_.push_back(cells);
}

std::string CsvWriter::str() const {
  std::ostringstream ss;
  for (std::size_t i = 0; i < columns_.size(); ++i) ss << (i ? "," : "") << columns_[i];
  ss << "\n";
  for (const auto& row : rows_) {
    for (std::size_t i = 0; i < row.size(); ++i) ss << (i ? "," : "") << row[i];
    ss << "\n";
  }
  return ss.str();
}

void CsvWriter::write(const std::filesystem::path& path) const { atomic_write_file(path, str()); }

std::string format_double(double v, int precision) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

}  // namespace bevkd
