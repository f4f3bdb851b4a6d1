#include "ctarnn/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "ctarnn/errors.hpp"
#include "ctarnn/seqf.hpp"

namespace ctarnn {

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    if (p.tensor.dtype() != DType::f32) {
      throw ConfigError("checkpoint: parameter " + p.name + " is not f32");
    }
    FloatArray a = FloatArray::from_tensor(p.tensor);
    if (a.shape.size() == 1) a.shape = {1, a.shape[0]};
    const std::string file = p.name + ".seqf";
    write_seqf(dir / file, a);
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"dtype", dtype_name(p.tensor.dtype())},
                      {"file", file}});
  }
  const nlohmann::json j = {{"format", kCheckpointFormat},
                            {"model", model.config().to_json()},
                            {"train", info.train.to_json()},
                            {"selected_epoch", info.selected_epoch},
                            {"selected_by", info.selected_by},
                            {"selected_value", info.selected_value},
                            {"params", params}};
  std::ofstream out(dir / "params.json");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + (dir / "params.json").string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto path = dir / "params.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
  if (j.value("format", "") != kCheckpointFormat) {
    throw FormatError(path.string() + ": not a checkpoint (format '" + j.value("format", "") + "')", 0);
  }
  LoadedCheckpoint out;
  std::map<std::string, nlohmann::json> entries;
  try {
    out.info.train = TrainConfig::from_json(j.at("train"));
    out.info.selected_epoch = j.at("selected_epoch").get<std::size_t>();
    out.info.selected_by = j.at("selected_by").get<std::string>();
    out.info.selected_value = j.at("selected_value").get<double>();
    out.model = make_model(ModelConfig::from_json(j.at("model")));
    for (const auto& e : j.at("params")) entries[e.at("name").get<std::string>()] = e;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
  const ParamList params = out.model->parameters();
  if (params.size() != entries.size()) {
    throw FormatError(path.string() + ": " + std::to_string(entries.size()) + " parameters stored, model has " +
                          std::to_string(params.size()),
                      0);
  }
  for (const auto& p : params) {
    const auto it = entries.find(p.name);
    if (it == entries.end()) throw FormatError(path.string() + ": missing parameter " + p.name, 0);
    if (it->second.at("shape").get<Shape>() != p.tensor.shape()) {
      throw FormatError(path.string() + ": shape mismatch for " + p.name, 0);
    }
    const FloatArray a = read_seqf(dir / it->second.at("file").get<std::string>());
    if (a.numel() != p.tensor.numel()) throw FormatError(path.string() + ": size mismatch for " + p.name, 0);
    Tensor t = p.tensor;
    t.assign_(Tensor::from_floats(p.tensor.shape(), a.data));
  }
  return out;
}

std::vector<std::filesystem::path> find_checkpoints(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "params.json")) return {dir};
  if (!std::filesystem::is_directory(dir)) throw IoError("no checkpoint directory " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "params.json")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw IoError("no checkpoints under " + dir.string());
  return out;
}

}  // namespace ctarnn
