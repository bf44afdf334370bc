#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevkd {

// Error categories map to CLI exit codes (config -> 2, missing artifact -> 3).
enum class ErrorKind { kConfig, kMissingArtifact, kRuntime };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

// FNV-1a over raw bytes; used for parameter and config audits.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 14695981039346656037ull);
std::string hex64(std::uint64_t v);

// Write-temp-then-rename so readers never observe partial files.
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);
void atomic_write_binary(const std::filesystem::path& path, const std::vector<char>& bytes);

std::string read_file(const std::filesystem::path& path);

std::string iso8601_now();

// Fixed-column CSV writer; keeps the header/row widths honest.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> columns);
  void add_row(const std::vector<std::string>& cells);
  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

std::string format_double(double v, int precision = 9);

}  // namespace bevkd
