#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "debnn/data.hpp"
#include "debnn/dataset.hpp"
#include "debnn/ensemble.hpp"
#include "debnn/metrics.hpp"
#include "debnn/nn.hpp"

namespace debnn {

/// Container version written by this build. Files carrying any other version
/// are rejected with VersionError.
inline constexpr int kFileFormatVersion = 1;

struct VersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Unreadable or truncated file; `offset` is the byte where decoding failed.
struct CorruptFileError : std::runtime_error {
  CorruptFileError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

/// A trained MAP network.
struct Checkpoint {
  std::string id;
  NetworkSpec spec;
  ParamVector theta;
  TrainConfig config;
  std::vector<EpochRecord> trace;
  int best_epoch = 0;
};

using Bytes = std::vector<std::uint8_t>;

Bytes encode(const Dataset& v);
Bytes encode(const OodPair& v);
Bytes encode(const Checkpoint& v);
Bytes encode(const PosteriorHandle& v);
Bytes encode(const EnsembleManifest& v);
Bytes encode(const MetricsReport& v);

template <typename T>
T decode(std::span<const std::uint8_t> bytes);

template <> Dataset decode<Dataset>(std::span<const std::uint8_t> bytes);
template <> OodPair decode<OodPair>(std::span<const std::uint8_t> bytes);
template <> Checkpoint decode<Checkpoint>(std::span<const std::uint8_t> bytes);
template <> PosteriorHandle decode<PosteriorHandle>(std::span<const std::uint8_t> bytes);
template <> EnsembleManifest decode<EnsembleManifest>(std::span<const std::uint8_t> bytes);
template <> MetricsReport decode<MetricsReport>(std::span<const std::uint8_t> bytes);

Bytes read_file(const std::filesystem::path& path);
/// Writes through a temporary file and a rename, so readers see either the
/// old or the new contents.
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

template <typename T>
void save(const std::filesystem::path& path, const T& value) {
  const Bytes bytes = encode(value);
  write_file(path, bytes);
}

template <typename T>
T load(const std::filesystem::path& path) {
  const Bytes bytes = read_file(path);
  return decode<T>(bytes);
}

/// One JSON object per line; the text form of a MetricsReport.
std::string report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const std::string& line);

struct DuplicateKeyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Append-only JSON-lines file of MetricsReports, unique on (experiment,
/// method, K, seed). Each append takes an exclusive flock, checks the key
/// against everything on disk and issues a single write(), so concurrent
/// appenders never interleave and readers skip at most an unfinished last
/// line.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path path);

  const std::filesystem::path& path() const { return path_; }

  void append(const MetricsReport& r);
  std::vector<MetricsReport> read() const;

  static std::string key(const MetricsReport& r);

 private:
  void sync_keys(int fd);

  std::filesystem::path path_;
  std::unordered_set<std::string> keys_;
  std::uint64_t scanned_ = 0;  // bytes of the file already folded into keys_
};

/// Reports as CSV with metrics_csv_header() columns.
std::string reports_to_csv(const std::vector<MetricsReport>& reports);

}  // namespace debnn
