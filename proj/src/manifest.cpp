#include "ctarnn/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "ctarnn/errors.hpp"
#include "ctarnn/seqf.hpp"

namespace ctarnn {

const char* stream_key(StreamKind kind) {
  switch (kind) {
    case StreamKind::spectrogram:
      return "spectrogram";
    case StreamKind::embeddings:
      return "embeddings";
    case StreamKind::text:
      return "text";
  }
  return "?";
}

std::optional<StreamKind> parse_stream_kind(const std::string& name) {
  if (name == "spectrogram" || name == "A") return StreamKind::spectrogram;
  if (name == "embeddings" || name == "E") return StreamKind::embeddings;
  if (name == "text" || name == "T") return StreamKind::text;
  return std::nullopt;
}

const std::optional<std::filesystem::path>& ManifestRecord::stream(StreamKind kind) const {
  switch (kind) {
    case StreamKind::spectrogram:
      return spectrogram;
    case StreamKind::embeddings:
      return embeddings;
    case StreamKind::text:
      return text;
  }
  return spectrogram;
}

namespace {

std::string required_string(const nlohmann::json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || !j[key].is_string()) {
    throw ManifestParseError(line, std::string("missing string field '") + key + "'");
  }
  return j[key].get<std::string>();
}

std::optional<std::filesystem::path> optional_path(const nlohmann::json& j, const char* key,
                                                   std::size_t line) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (!j[key].is_string()) {
    throw ManifestParseError(line, std::string("field '") + key + "' must be a string path");
  }
  return std::filesystem::path(j[key].get<std::string>());
}

}  // namespace

ManifestLoad parse_manifest(const std::string& text, const std::filesystem::path& root,
                            const std::vector<std::string>& class_names) {
  ManifestLoad out;
  out.manifest.root = root;
  std::unordered_map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestParseError(lineno, e.what());
    }
    if (!j.is_object()) throw ManifestParseError(lineno, "expected a JSON object");
    ManifestRecord r;
    r.utterance_id = required_string(j, "utterance_id", lineno);
    r.speaker_id = required_string(j, "speaker_id", lineno);
    r.session_id = required_string(j, "session_id", lineno);
    r.label = required_string(j, "label", lineno);
    r.spectrogram = optional_path(j, "spectrogram", lineno);
    r.embeddings = optional_path(j, "embeddings", lineno);
    r.text = optional_path(j, "text", lineno);
    if (j.contains("meta")) r.meta = j["meta"];

    if (auto it = seen.find(r.utterance_id); it != seen.end()) {
      out.issues.push_back({lineno, "duplicate utterance_id '" + r.utterance_id +
                                        "' (first seen on line " + std::to_string(it->second) +
                                        ")"});
    } else {
      seen.emplace(r.utterance_id, lineno);
    }
    if (!class_names.empty() &&
        std::find(class_names.begin(), class_names.end(), r.label) == class_names.end()) {
      out.issues.push_back({lineno, "label '" + r.label + "' is not in the class set"});
    }
    for (auto kind : {StreamKind::spectrogram, StreamKind::embeddings, StreamKind::text}) {
      const auto& p = r.stream(kind);
      if (!p) continue;
      const auto full = out.manifest.resolve(*p);
      try {
        inspect_seqf(full);
      } catch (const std::exception& e) {
        out.issues.push_back({lineno, std::string(stream_key(kind)) + " file: " + e.what()});
      }
    }
    out.manifest.records.push_back(std::move(r));
  }
  return out;
}

ManifestLoad load_manifest(const std::filesystem::path& path,
                           const std::vector<std::string>& class_names) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path(), class_names);
}

nlohmann::json record_to_json(const ManifestRecord& r) {
  nlohmann::json j = {{"utterance_id", r.utterance_id},
                      {"speaker_id", r.speaker_id},
                      {"session_id", r.session_id},
                      {"label", r.label}};
  if (r.spectrogram) j["spectrogram"] = r.spectrogram->generic_string();
  if (r.embeddings) j["embeddings"] = r.embeddings->generic_string();
  if (r.text) j["text"] = r.text->generic_string();
  if (!r.meta.empty()) j["meta"] = r.meta;
  return j;
}

Manifest pair_manifests(const Manifest& x, const Manifest& y, StreamKind y_kind) {
  std::unordered_map<std::string, const ManifestRecord*> by_id;
  for (const auto& r : y.records) by_id[r.utterance_id] = &r;
  std::vector<std::string> missing;
  Manifest out{x.root, {}};
  for (const auto& r : x.records) {
    auto it = by_id.find(r.utterance_id);
    if (it == by_id.end()) {
      missing.push_back(r.utterance_id);
      continue;
    }
    const auto& path = it->second->stream(y_kind);
    if (!path) {
      throw ManifestMismatchError("utterance " + r.utterance_id + " has no " + stream_key(y_kind) +
                                  " stream in the second manifest");
    }
    ManifestRecord merged = r;
    const auto resolved = std::filesystem::absolute(y.resolve(*path));
    switch (y_kind) {
      case StreamKind::spectrogram:
        merged.spectrogram = resolved;
        break;
      case StreamKind::embeddings:
        merged.embeddings = resolved;
        break;
      case StreamKind::text:
        merged.text = resolved;
        break;
    }
    out.records.push_back(std::move(merged));
    by_id.erase(it);
  }
  for (const auto& [id, rec] : by_id) missing.push_back(id);
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    throw ManifestMismatchError("stream manifests disagree on " + std::to_string(missing.size()) +
                                " utterance id(s), first: " + missing.front());
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
}

}  // namespace ctarnn
