#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctarnn/config_file.hpp"
#include "ctarnn/dataset.hpp"
#include "ctarnn/folds.hpp"
#include "ctarnn/metrics.hpp"
#include "ctarnn/model.hpp"

namespace ctarnn {

enum class Selection { loss, uar };

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 50;
  double lr0 = 1e-3;
  std::size_t plateau_patience = 10;
  double lr_factor = 0.5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::vector<std::string> classes;  // empty: sorted labels of the manifest
  Selection selection = Selection::loss;

  void validate() const;
  static const std::vector<std::string>& keys();
  static TrainConfig from_config(const KeyValueConfig& cfg);
  void write_to(KeyValueConfig& cfg) const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Model and training settings read from one key = value file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  static RunConfig from_config(const KeyValueConfig& cfg);
  static RunConfig load(const std::filesystem::path& path);
  KeyValueConfig to_config() const;
  // Fills classes, n_classes, input dims and the model seed from the data.
  void resolve(const Manifest& manifest);
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_uar = 0.0;
};

struct Evaluation {
  double loss = 0.0;  // mean cross-entropy per utterance
  std::vector<std::size_t> indices;  // dataset index of each row below
  std::vector<int> labels;
  std::vector<int> predictions;
  // Argmax channel of the head-averaged channel attention (CTA models only).
  std::vector<std::size_t> attended_channel;
  ConfusionMatrix confusion;
  double uar = 0.0;
};

Evaluation evaluate(const Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                    std::size_t batch_size);

// Per utterance: argmax over channels of alpha_t averaged over heads.
std::vector<std::size_t> attended_channels(const CtaAttentionOutput& attention);

struct TrainedModel {
  std::unique_ptr<Model> model;
  std::vector<EpochRecord> history;
  std::size_t selected_epoch = 0;
  double selected_value = 0.0;
};

using LogFn = std::function<void(const std::string&)>;

// Trains for max_epochs and restores the parameters of the best epoch by the
// configured selection metric. Per-epoch invariant checks run on the model.
TrainedModel train_model(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Dataset& data,
                         const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                         std::uint64_t seed, const LogFn& log = {});

struct FoldReport {
  Fold fold;
  std::size_t n_train = 0, n_val = 0, n_test = 0;
  ConfusionMatrix confusion;
  double uar = 0.0;
  std::size_t classes_present = 0;
  std::size_t selected_epoch = 0;
  double selected_value = 0.0;
  std::vector<EpochRecord> history;
};

struct EvalReport {
  std::string kind;  // "cv" or "cross_eval"
  std::vector<std::string> classes;
  std::vector<FoldReport> folds;           // cv
  std::vector<std::string> checkpoints;    // cross_eval
  std::vector<ConfusionMatrix> confusions;  // cross_eval, per checkpoint
  std::vector<double> uars;                // per fold or per checkpoint
  double uar_mean = 0.0;
  double uar_std = 0.0;  // sample standard deviation, 0 for one value
  nlohmann::json meta = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct CvOptions {
  std::optional<std::filesystem::path> checkpoint_root;  // writes fold_XX/ under it
  std::size_t threads = 1;
  LogFn log;
};

struct CvResult {
  EvalReport report;
  FoldPlan plan;
  std::vector<std::unique_ptr<Model>> models;  // best model of each fold
  std::vector<Evaluation> test;                // per fold
};

// `cfg` must be resolved against the manifest (RunConfig::resolve).
CvResult run_cv(const Manifest& manifest, const RunConfig& cfg, const Dataset& data,
                const CvOptions& options = {});
CvResult run_cv(const Manifest& manifest, RunConfig cfg, const CvOptions& options = {});

// Evaluates every checkpoint on the whole of `manifest`.
EvalReport cross_eval(const std::vector<std::filesystem::path>& checkpoints, const Manifest& manifest,
                      std::size_t batch_size = 32);

double mean_of(const std::vector<double>& v);
double sample_std(const std::vector<double>& v);

}  // namespace ctarnn
