#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ctarnn {

enum class StreamKind { spectrogram, embeddings, text };

const char* stream_key(StreamKind kind);
std::optional<StreamKind> parse_stream_kind(const std::string& name);

struct ManifestRecord {
  std::string utterance_id;
  std::string speaker_id;
  std::string session_id;
  std::string label;
  std::optional<std::filesystem::path> spectrogram;
  std::optional<std::filesystem::path> embeddings;
  std::optional<std::filesystem::path> text;
  // Free-form extras (the synthetic generator stores the planted channel here).
  nlohmann::json meta = nlohmann::json::object();

  const std::optional<std::filesystem::path>& stream(StreamKind kind) const;
};

struct ManifestIssue {
  std::size_t line;
  std::string message;
};

struct Manifest {
  // Directory that relative stream paths resolve against.
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : root / p;
  }
};

struct ManifestLoad {
  Manifest manifest;
  std::vector<ManifestIssue> issues;
  bool ok() const { return issues.empty(); }
};

// Raised for malformed JSON; `line` is 1-based.
class ManifestParseError : public std::runtime_error {
 public:
  ManifestParseError(std::size_t line, const std::string& what)
      : std::runtime_error("manifest line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Parses and validates. Duplicate ids, unknown labels and missing or
// unparsable stream files are reported per line instead of thrown. An empty
// class list skips the label check.
ManifestLoad load_manifest(const std::filesystem::path& path,
                           const std::vector<std::string>& class_names = {});
ManifestLoad parse_manifest(const std::string& text, const std::filesystem::path& root,
                            const std::vector<std::string>& class_names = {});

// Joins two manifests utterance by utterance: records keep their metadata
// and streams from `x` and take stream `y_kind` from `y` (as an absolute
// path). Throws ManifestMismatchError unless both list the same utterances.
class ManifestMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
Manifest pair_manifests(const Manifest& x, const Manifest& y, StreamKind y_kind);

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
nlohmann::json record_to_json(const ManifestRecord& r);

}  // namespace ctarnn
