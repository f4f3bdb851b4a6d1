#include "ctarnn/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <set>
#include <thread>

#include "ctarnn/checkpoint.hpp"
#include "ctarnn/errors.hpp"
#include "ctarnn/optim.hpp"

namespace ctarnn {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t positive(const KeyValueConfig& cfg, const std::string& key, std::size_t fallback) {
  const long long v = cfg.get_int(key, static_cast<long long>(fallback));
  if (v <= 0) throw ConfigError("key '" + key + "' must be positive");
  return static_cast<std::size_t>(v);
}

const char* selection_name(Selection s) { return s == Selection::loss ? "loss" : "uar"; }

Selection parse_selection(const std::string& s) {
  if (s == "loss") return Selection::loss;
  if (s == "uar") return Selection::uar;
  throw ConfigError("selection must be 'loss' or 'uar', got '" + s + "'");
}

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fold)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

nlohmann::json epoch_json(const EpochRecord& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss},
          {"val_loss", e.val_loss}, {"val_uar", e.val_uar}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  if (batch_size == 0 || max_epochs == 0 || plateau_patience == 0) {
    throw ConfigError("batch_size, max_epochs and plateau_patience must be positive");
  }
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw ConfigError("lr0 must be positive");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("lr_factor must lie in (0, 1)");
  if (plateau_patience >= max_epochs) throw ConfigError("plateau_patience must be below max_epochs");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in (0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (std::set<std::string>(classes.begin(), classes.end()).size() != classes.size()) {
    throw ConfigError("classes contain duplicates");
  }
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k{"batch_size", "max_epochs", "lr0",       "plateau_patience",
                                          "lr_factor",  "adam_beta1", "adam_beta2", "adam_eps",
                                          "seed",       "classes",    "selection"};
  return k;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg) {
  TrainConfig t;
  t.batch_size = positive(cfg, "batch_size", t.batch_size);
  t.max_epochs = positive(cfg, "max_epochs", t.max_epochs);
  t.lr0 = cfg.get_double("lr0", t.lr0);
  t.plateau_patience = positive(cfg, "plateau_patience", t.plateau_patience);
  t.lr_factor = cfg.get_double("lr_factor", t.lr_factor);
  t.adam_beta1 = cfg.get_double("adam_beta1", t.adam_beta1);
  t.adam_beta2 = cfg.get_double("adam_beta2", t.adam_beta2);
  t.adam_eps = cfg.get_double("adam_eps", t.adam_eps);
  const long long seed = cfg.get_int("seed", static_cast<long long>(t.seed));
  if (seed < 0) throw ConfigError("seed must be non-negative");
  t.seed = static_cast<std::uint64_t>(seed);
  t.classes = cfg.get_list("classes", {});
  t.selection = parse_selection(cfg.get_string("selection", selection_name(t.selection)));
  t.validate();
  return t;
}

void TrainConfig::write_to(KeyValueConfig& cfg) const {
  cfg.set("batch_size", std::to_string(batch_size));
  cfg.set("max_epochs", std::to_string(max_epochs));
  cfg.set("lr0", fmt_double(lr0));
  cfg.set("plateau_patience", std::to_string(plateau_patience));
  cfg.set("lr_factor", fmt_double(lr_factor));
  cfg.set("adam_beta1", fmt_double(adam_beta1));
  cfg.set("adam_beta2", fmt_double(adam_beta2));
  cfg.set("adam_eps", fmt_double(adam_eps));
  cfg.set("seed", std::to_string(seed));
  cfg.set("classes", "[" + join_list(classes) + "]");
  cfg.set("selection", selection_name(selection));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_size", batch_size}, {"max_epochs", max_epochs},
          {"lr0", lr0},               {"plateau_patience", plateau_patience},
          {"lr_factor", lr_factor},   {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2}, {"adam_eps", adam_eps},
          {"seed", seed},             {"classes", classes},
          {"selection", selection_name(selection)}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  try {
    TrainConfig t;
    t.batch_size = j.at("batch_size").get<std::size_t>();
    t.max_epochs = j.at("max_epochs").get<std::size_t>();
    t.lr0 = j.at("lr0").get<double>();
    t.plateau_patience = j.at("plateau_patience").get<std::size_t>();
    t.lr_factor = j.at("lr_factor").get<double>();
    t.adam_beta1 = j.at("adam_beta1").get<double>();
    t.adam_beta2 = j.at("adam_beta2").get<double>();
    t.adam_eps = j.at("adam_eps").get<double>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.classes = j.at("classes").get<std::vector<std::string>>();
    t.selection = parse_selection(j.at("selection").get<std::string>());
    t.validate();
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

RunConfig RunConfig::from_config(const KeyValueConfig& cfg) {
  std::set<std::string> known(ModelConfig::keys().begin(), ModelConfig::keys().end());
  known.insert(TrainConfig::keys().begin(), TrainConfig::keys().end());
  cfg.reject_unknown(known);
  RunConfig r;
  r.model = ModelConfig::from_config(cfg);
  r.train = TrainConfig::from_config(cfg);
  r.model.seed = r.train.seed;
  if (!r.train.classes.empty()) {
    if (cfg.has("n_classes") && r.model.n_classes != r.train.classes.size()) {
      throw ConfigError("n_classes disagrees with the classes list");
    }
    r.model.n_classes = r.train.classes.size();
  }
  return r;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  return from_config(KeyValueConfig::load(path));
}

KeyValueConfig RunConfig::to_config() const {
  KeyValueConfig cfg;
  model.write_to(cfg);
  train.write_to(cfg);
  return cfg;
}

void RunConfig::resolve(const Manifest& manifest) {
  const auto labels = manifest_classes(manifest);
  if (train.classes.empty()) {
    train.classes = labels;
  } else {
    for (const auto& l : labels) {
      if (std::find(train.classes.begin(), train.classes.end(), l) == train.classes.end()) {
        throw ConfigError("manifest label '" + l + "' is not in the classes list");
      }
    }
  }
  if (train.classes.size() < 2) throw ConfigError("need at least two classes");
  model.n_classes = train.classes.size();
  model.seed = train.seed;
  resolve_input_dims(model, manifest);
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<std::size_t> attended_channels(const CtaAttentionOutput& attention) {
  if (attention.alpha_t.empty()) return {};
  const std::size_t b = attention.alpha_t[0].size(0), n = attention.alpha_t[0].size(1);
  std::vector<double> mean(b * n, 0.0);
  for (const Tensor& a : attention.alpha_t) {
    const auto v = a.values();
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i];
  }
  std::vector<std::size_t> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    const auto row = mean.begin() + static_cast<std::ptrdiff_t>(r * n);
    out[r] = static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(n)) - row);
  }
  return out;
}

Evaluation evaluate(const Model& model, const Dataset& data, const std::vector<std::size_t>& indices,
                    std::size_t batch_size) {
  if (indices.empty()) throw ConfigError("evaluate: no utterances");
  NoGradGuard guard;
  Evaluation ev;
  double total = 0.0;
  for (const auto& idx : length_batches(data, indices, batch_size, nullptr)) {
    const Batch batch = make_batch(data, idx);
    const ForwardResult r = model.forward(batch, false, nullptr);
    total += cross_entropy(r.logits, batch.labels).item() * static_cast<double>(batch.size());
    const std::size_t c = r.logits.size(1);
    const auto logits = r.logits.values();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto row = logits.begin() + static_cast<std::ptrdiff_t>(i * c);
      ev.predictions.push_back(static_cast<int>(std::max_element(row, row + static_cast<std::ptrdiff_t>(c)) - row));
    }
    ev.labels.insert(ev.labels.end(), batch.labels.begin(), batch.labels.end());
    ev.indices.insert(ev.indices.end(), idx.begin(), idx.end());
    if (r.attention) {
      const auto ch = attended_channels(*r.attention);
      ev.attended_channel.insert(ev.attended_channel.end(), ch.begin(), ch.end());
    }
  }
  ev.loss = total / static_cast<double>(ev.labels.size());
  ev.confusion = confusion_matrix(ev.labels, ev.predictions, model.config().n_classes);
  ev.uar = uar(ev.confusion);
  return ev;
}

// ---------------------------------------------------------------------------
// Training

TrainedModel train_model(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const Dataset& data,
                         const std::vector<std::size_t>& train_idx, const std::vector<std::size_t>& val_idx,
                         std::uint64_t seed, const LogFn& log) {
  train_cfg.validate();
  if (train_idx.empty() || val_idx.empty()) throw ConfigError("train_model: empty train or validation set");
  ModelConfig mc = model_cfg;
  mc.seed = seed;
  TrainedModel out;
  out.model = make_model(mc);
  const ParamList params = out.model->parameters();
  Adam adam(params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps);
  PlateauScheduler scheduler(train_cfg.lr0, train_cfg.plateau_patience, train_cfg.lr_factor);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x7a11u};
  Rng rng(seq);

  scheduler.observe(evaluate(*out.model, data, val_idx, train_cfg.batch_size).loss);

  std::vector<Tensor> best;
  double best_value = INFINITY;
  for (std::size_t epoch = 1; epoch <= train_cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = scheduler.lr();
    double total = 0.0;
    for (const auto& idx : length_batches(data, train_idx, train_cfg.batch_size, &rng)) {
      const Batch batch = make_batch(data, idx);
      adam.zero_grad();
      const Tensor loss = cross_entropy(out.model->forward(batch, true, &rng).logits, batch.labels);
      total += loss.item() * static_cast<double>(batch.size());
      backward(loss);
      adam.step(rec.lr);
    }
    adam.zero_grad();
    out.model->check_invariants();
    rec.train_loss = total / static_cast<double>(train_idx.size());
    const Evaluation val = evaluate(*out.model, data, val_idx, train_cfg.batch_size);
    rec.val_loss = val.loss;
    rec.val_uar = val.uar;
    scheduler.observe(val.loss);
    out.history.push_back(rec);
    const double value = train_cfg.selection == Selection::loss ? val.loss : -val.uar;
    if (value < best_value) {
      best_value = value;
      out.selected_epoch = epoch;
      out.selected_value = train_cfg.selection == Selection::loss ? val.loss : val.uar;
      best.clear();
      for (const auto& p : params) best.push_back(p.tensor.detach());
    }
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %3zu  lr %.3g  train_loss %.4f  val_loss %.4f  val_uar %.4f%s",
                    epoch, rec.lr, rec.train_loss, rec.val_loss, rec.val_uar,
                    out.selected_epoch == epoch ? "  *" : "");
      log(line);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    t.assign_(best[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["kind"] = kind;
  j["classes"] = classes;
  j["absent_class_policy"] = "classes without test labels are excluded from the UAR mean";
  if (kind == "cv") {
    auto folds_j = nlohmann::json::array();
    for (const auto& f : folds) {
      auto history = nlohmann::json::array();
      for (const auto& e : f.history) history.push_back(epoch_json(e));
      folds_j.push_back({{"fold", f.fold.index},
                         {"test_speaker", f.fold.test_speaker},
                         {"val_speaker", f.fold.val_speaker},
                         {"held_out_session", f.fold.held_out_session},
                         {"train_sessions", f.fold.train_sessions},
                         {"n_train", f.n_train},
                         {"n_val", f.n_val},
                         {"n_test", f.n_test},
                         {"confusion", f.confusion},
                         {"uar", f.uar},
                         {"classes_present", f.classes_present},
                         {"selected_epoch", f.selected_epoch},
                         {"selected_value", f.selected_value},
                         {"history", history}});
    }
    j["folds"] = folds_j;
  } else {
    auto models = nlohmann::json::array();
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      models.push_back({{"checkpoint", checkpoints[i]}, {"confusion", confusions[i]}, {"uar", uars[i]}});
    }
    j["models"] = models;
  }
  j["uar"] = uars;
  j["uar_mean"] = uar_mean;
  j["uar_std"] = uar_std;
  j["meta"] = meta;
  return j;
}

// ---------------------------------------------------------------------------
// Cross-validation

CvResult run_cv(const Manifest& manifest, const RunConfig& cfg, const Dataset& data, const CvOptions& options) {
  cfg.train.validate();
  cfg.model.validate(true);
  if (data.size() != manifest.records.size()) throw ConfigError("run_cv: dataset does not match manifest");
  CvResult result;
  result.plan = make_fold_plan(manifest);
  const std::size_t n_folds = result.plan.folds.size();
  result.models.resize(n_folds);
  result.test.resize(n_folds);
  std::vector<FoldReport> reports(n_folds);

  std::mutex log_mutex;
  auto run_fold = [&](std::size_t k) {
    const Fold& fold = result.plan.folds[k];
    const FoldSplit split = split_fold(fold, manifest);
    if (split.train.empty() || split.val.empty() || split.test.empty()) {
      throw ConfigError("fold " + std::to_string(k) + " has an empty partition");
    }
    LogFn log;
    if (options.log) {
      log = [&, k](const std::string& line) {
        std::lock_guard lock(log_mutex);
        options.log("fold " + std::to_string(k) + "  " + line);
      };
    }
    TrainedModel trained = train_model(cfg.model, cfg.train, data, split.train, split.val,
                                       fold_seed(cfg.train.seed, k), log);
    Evaluation test = evaluate(*trained.model, data, split.test, cfg.train.batch_size);
    FoldReport& r = reports[k];
    r.fold = fold;
    r.n_train = split.train.size();
    r.n_val = split.val.size();
    r.n_test = split.test.size();
    r.confusion = test.confusion;
    r.uar = test.uar;
    r.classes_present = classes_present(test.confusion);
    r.selected_epoch = trained.selected_epoch;
    r.selected_value = trained.selected_value;
    r.history = trained.history;
    if (options.checkpoint_root) {
      char name[32];
      std::snprintf(name, sizeof name, "fold_%02zu", k);
      CheckpointInfo info{cfg.train, trained.selected_epoch, selection_name(cfg.train.selection),
                          trained.selected_value};
      save_checkpoint(*options.checkpoint_root / name, *trained.model, info);
    }
    if (log) {
      char line[96];
      std::snprintf(line, sizeof line, "test_uar %.4f  (selected epoch %zu)", test.uar, trained.selected_epoch);
      log(line);
    }
    result.models[k] = std::move(trained.model);
    result.test[k] = std::move(test);
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.threads, n_folds));
  if (workers == 1) {
    for (std::size_t k = 0; k < n_folds; ++k) run_fold(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n_folds);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k; (k = next++) < n_folds;) {
          try {
            run_fold(k);
          } catch (...) {
            errors[k] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EvalReport& rep = result.report;
  rep.kind = "cv";
  rep.classes = cfg.train.classes;
  rep.folds = std::move(reports);
  for (const auto& f : rep.folds) rep.uars.push_back(f.uar);
  rep.uar_mean = mean_of(rep.uars);
  rep.uar_std = sample_std(rep.uars);
  rep.meta = {{"model", cfg.model.to_json()},
              {"train", cfg.train.to_json()},
              {"seed", cfg.train.seed},
              {"n_folds", n_folds},
              {"n_utterances", data.size()},
              {"selection", selection_name(cfg.train.selection)}};
  return result;
}

CvResult run_cv(const Manifest& manifest, RunConfig cfg, const CvOptions& options) {
  cfg.resolve(manifest);
  const Dataset data(manifest, cfg.model, cfg.train.classes);
  return run_cv(manifest, cfg, data, options);
}

EvalReport cross_eval(const std::vector<std::filesystem::path>& checkpoints, const Manifest& manifest,
                      std::size_t batch_size) {
  if (checkpoints.empty()) throw ConfigError("cross_eval: no checkpoints");
  EvalReport rep;
  rep.kind = "cross_eval";
  const auto labels = manifest_classes(manifest);
  const std::set<std::string> label_set(labels.begin(), labels.end());
  std::vector<std::size_t> all(manifest.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  nlohmann::json models_meta = nlohmann::json::array();
  for (const auto& dir : checkpoints) {
    LoadedCheckpoint ck = load_checkpoint(dir);
    const auto& classes = ck.info.train.classes;
    if (std::set<std::string>(classes.begin(), classes.end()) != label_set) {
      throw ConfigError("cross_eval: label set of " + dir.string() + " [" + join_list(classes) +
                        "] differs from the manifest's [" + join_list(labels) + "]");
    }
    if (rep.classes.empty()) {
      rep.classes = classes;
    } else if (rep.classes != classes) {
      throw ConfigError("cross_eval: checkpoints disagree on the class list");
    }
    ModelConfig mc = ck.model->config();
    resolve_input_dims(mc, manifest);
    const Dataset data(manifest, mc, classes);
    const Evaluation ev = evaluate(*ck.model, data, all, batch_size);
    rep.checkpoints.push_back(dir.string());
    rep.confusions.push_back(ev.confusion);
    rep.uars.push_back(ev.uar);
    models_meta.push_back({{"model", mc.to_json()}, {"selected_epoch", ck.info.selected_epoch}});
  }
  rep.uar_mean = mean_of(rep.uars);
  rep.uar_std = sample_std(rep.uars);
  rep.meta = {{"n_utterances", manifest.records.size()}, {"models", models_meta}};
  return rep;
}

}  // namespace ctarnn
