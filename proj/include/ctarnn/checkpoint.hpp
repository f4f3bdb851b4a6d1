#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "ctarnn/model.hpp"
#include "ctarnn/trainer.hpp"

namespace ctarnn {

// <dir>/params.json plus one SEQF file per parameter tensor. 1-D tensors are
// stored as [1 x n] and restored to their model shape.
struct CheckpointInfo {
  TrainConfig train;
  std::size_t selected_epoch = 0;
  std::string selected_by = "loss";
  double selected_value = 0.0;
};

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  CheckpointInfo info;
};

inline constexpr const char* kCheckpointFormat = "ctarnn-checkpoint-1";

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const CheckpointInfo& info);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// `dir` itself if it holds params.json, otherwise its immediate
// subdirectories that do, sorted by name.
std::vector<std::filesystem::path> find_checkpoints(const std::filesystem::path& dir);

}  // namespace ctarnn
