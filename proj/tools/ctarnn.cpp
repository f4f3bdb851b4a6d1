#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "ctarnn/checkpoint.hpp"
#include "ctarnn/cta.hpp"
#include "ctarnn/dataset.hpp"
#include "ctarnn/errors.hpp"
#include "ctarnn/gradcheck.hpp"
#include "ctarnn/lmfb.hpp"
#include "ctarnn/manifest.hpp"
#include "ctarnn/synth.hpp"
#include "ctarnn/trainer.hpp"
#include "ctarnn/wav.hpp"

namespace fs = std::filesystem;
using namespace ctarnn;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t default_threads() {
  if (const char* env = std::getenv("CTARNN_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("CTARNN_THREADS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("cannot write " + path.string());
}

struct Provenance {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> inputs, outputs;

  void write(const fs::path& path) const {
    write_json(path, {{"command", command},
                      {"argv", argv},
                      {"config", config},
                      {"inputs", inputs},
                      {"outputs", outputs}});
  }
};

void print_config(const std::string& command, const KeyValueConfig& cfg) {
  std::cout << "# " << command << " resolved config\n" << cfg.dump() << std::flush;
}

Manifest load_valid_manifest(const fs::path& path) {
  ManifestLoad load = load_manifest(path);
  if (!load.ok()) {
    std::ostringstream os;
    os << path.string() << ": " << load.issues.size() << " invalid record(s)";
    for (const auto& i : load.issues) os << "\n  line " << i.line << ": " << i.message;
    throw IoError(os.str());
  }
  return load.manifest;
}

StreamKind stream_arg(const std::string& name) {
  auto k = parse_stream_kind(name);
  if (!k) throw UsageError("unknown stream '" + name + "'");
  return *k;
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError(what + ": expected comma-separated positive integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw UsageError(what + " is empty");
  return out;
}

// ---------------------------------------------------------------------------

struct LmfbArgs {
  std::string wav, out;
  bool normalize = false;
};

int cmd_lmfb(const LmfbArgs& a, Provenance prov) {
  LmfbConfig cfg;
  cfg.normalize = a.normalize;
  KeyValueConfig shown;
  shown.set("frame_len", std::to_string(cfg.frame_len));
  shown.set("frame_shift", std::to_string(cfg.frame_shift));
  shown.set("n_mels", std::to_string(cfg.n_mels));
  shown.set("normalize", cfg.normalize ? "true" : "false");
  shown.set("seed", "none");
  print_config("lmfb", shown);
  const PcmAudio audio = read_wav(a.wav);
  require_16k_mono(audio);
  const FloatArray feats = extract_lmfb(audio.samples, static_cast<int>(audio.sample_rate_hz), cfg);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_seqf(out, feats);
  std::cout << "wrote " << out.string() << " " << shape_str(feats.shape) << "\n";
  prov.config = {{"normalize", cfg.normalize}, {"n_mels", cfg.n_mels}};
  prov.inputs = {a.wav};
  prov.outputs = {out.string()};
  prov.write(fs::path(out.string() + ".provenance.json"));
  return kOk;
}

struct SynthArgs {
  std::string spec, out_dir;
  std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a, Provenance prov) {
  KeyValueConfig raw = a.spec.empty() ? KeyValueConfig{} : KeyValueConfig::load(a.spec);
  SynthSpec spec = SynthSpec::from_config(raw);
  if (a.seed) spec.seed = *a.seed;
  print_config("synth", spec.to_config());
  const auto records = generate_synth_corpus(spec, a.out_dir);
  std::cout << "wrote " << records.size() << " utterances to " << a.out_dir << "\n";
  const KeyValueConfig resolved = spec.to_config();
  for (const auto& [k, v] : resolved.entries()) prov.config[k] = v;
  if (!a.spec.empty()) prov.inputs = {a.spec};
  prov.outputs = {(fs::path(a.out_dir) / "manifest.jsonl").string(), (fs::path(a.out_dir) / "embeddings").string()};
  prov.write(fs::path(a.out_dir) / "provenance.json");
  return kOk;
}

struct RunArgs {
  std::string config, manifest, manifest2, stream2, out;
  std::optional<std::uint64_t> seed;
  std::string val_speaker;
};

Manifest run_manifest(const RunArgs& a) {
  Manifest m = load_valid_manifest(a.manifest);
  if (!a.manifest2.empty()) {
    if (a.stream2.empty()) throw UsageError("--manifest2 needs --stream2");
    m = pair_manifests(m, load_valid_manifest(a.manifest2), stream_arg(a.stream2));
  }
  return m;
}

RunConfig run_config(const RunArgs& a, const Manifest& manifest) {
  RunConfig cfg = RunConfig::load(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.resolve(manifest);
  print_config("run", cfg.to_config());
  return cfg;
}

int cmd_cv(const RunArgs& a, std::size_t threads, Provenance prov) {
  const Manifest manifest = run_manifest(a);
  const RunConfig cfg = run_config(a, manifest);
  const fs::path out(a.out);
  CvOptions opts;
  opts.checkpoint_root = out / "folds";
  opts.threads = threads;
  opts.log = [](const std::string& line) { std::cerr << line << "\n"; };
  const auto t0 = std::chrono::steady_clock::now();
  CvResult res = run_cv(manifest, cfg, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_json(out / "report.json", res.report.to_json());
  std::printf("folds %zu  uar %.4f +- %.4f  (%.1f s)\n", res.plan.folds.size(), res.report.uar_mean,
              res.report.uar_std, secs);
  prov.config = {{"model", cfg.model.to_json()}, {"train", cfg.train.to_json()}};
  prov.inputs = {a.config, a.manifest};
  if (!a.manifest2.empty()) prov.inputs.push_back(a.manifest2);
  prov.outputs = {(out / "report.json").string(), (out / "folds").string()};
  prov.write(out / "provenance.json");
  return kOk;
}

int cmd_train(const RunArgs& a, Provenance prov) {
  const Manifest manifest = run_manifest(a);
  const RunConfig cfg = run_config(a, manifest);
  std::set<std::string> speakers;
  for (const auto& r : manifest.records) speakers.insert(r.speaker_id);
  const std::string val = a.val_speaker.empty() ? *speakers.rbegin() : a.val_speaker;
  if (!speakers.count(val)) throw UsageError("unknown validation speaker '" + val + "'");
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    (manifest.records[i].speaker_id == val ? val_idx : train_idx).push_back(i);
  }
  std::cout << "validation speaker " << val << "\n";
  const Dataset data(manifest, cfg.model, cfg.train.classes);
  TrainedModel trained = train_model(cfg.model, cfg.train, data, train_idx, val_idx, cfg.train.seed,
                                     [](const std::string& line) { std::cerr << line << "\n"; });
  const fs::path out(a.out);
  save_checkpoint(out, *trained.model,
                  {cfg.train, trained.selected_epoch,
                   cfg.train.selection == Selection::loss ? "loss" : "uar", trained.selected_value});
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : trained.history) {
    history.push_back({{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss}, {"val_uar", e.val_uar}});
  }
  write_json(out / "history.json", {{"val_speaker", val}, {"selected_epoch", trained.selected_epoch},
                                    {"history", history}});
  std::cout << "selected epoch " << trained.selected_epoch << ", wrote " << (out / "params.json").string() << "\n";
  prov.config = {{"model", cfg.model.to_json()}, {"train", cfg.train.to_json()}};
  prov.inputs = {a.config, a.manifest};
  prov.outputs = {(out / "params.json").string(), (out / "history.json").string()};
  prov.write(out / "provenance.json");
  return kOk;
}

struct EvalArgs {
  std::string checkpoints, manifest, manifest2, stream2, out;
  std::size_t batch_size = 32;
};

int cmd_eval(const EvalArgs& a, Provenance prov) {
  RunArgs ra;
  ra.manifest = a.manifest;
  ra.manifest2 = a.manifest2;
  ra.stream2 = a.stream2;
  const Manifest manifest = run_manifest(ra);
  const auto dirs = find_checkpoints(a.checkpoints);
  KeyValueConfig shown;
  shown.set("checkpoints", std::to_string(dirs.size()));
  shown.set("batch_size", std::to_string(a.batch_size));
  shown.set("seed", "none");
  print_config("eval", shown);
  const EvalReport rep = cross_eval(dirs, manifest, a.batch_size);
  const fs::path out(a.out);
  write_json(out / "report.json", rep.to_json());
  for (std::size_t i = 0; i < rep.uars.size(); ++i) std::printf("%s  uar %.4f\n", rep.checkpoints[i].c_str(), rep.uars[i]);
  std::printf("mean uar %.4f +- %.4f over %zu model(s)\n", rep.uar_mean, rep.uar_std, rep.uars.size());
  prov.inputs = {a.checkpoints, a.manifest};
  prov.outputs = {(out / "report.json").string()};
  prov.write(out / "provenance.json");
  return kOk;
}

struct GradcheckArgs {
  std::string model = "cta";
  std::string dims = "3,5,4,4,2,4,3";
  std::uint64_t seed = 1;
  double tol = 1e-4;
  std::string corrupt;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a, Provenance prov) {
  auto kind = parse_model_kind(a.model);
  if (!kind) throw UsageError("unknown model '" + a.model + "'");
  const auto d = parse_sizes(a.dims, "--dims");
  if (d.size() != 7) throw UsageError("--dims wants N,m,d_e,d_h,heads,d_alpha,classes");
  GradcheckSpec spec;
  spec.kind = *kind;
  spec.channels = d[0];
  spec.steps = d[1];
  spec.input_dim = d[2];
  spec.hidden = d[3];
  spec.heads = d[4];
  spec.head_dim = d[5];
  spec.classes = d[6];
  spec.seed = a.seed;
  KeyValueConfig shown;
  shown.set("model", a.model);
  shown.set("dims", a.dims);
  shown.set("tolerance", std::to_string(a.tol));
  shown.set("seed", std::to_string(a.seed));
  print_config("gradcheck", shown);
  if (!a.corrupt.empty()) set_adjoint_fault(a.corrupt, 1.5);
  const GradcheckResult r = run_gradcheck(spec);
  set_adjoint_fault("", 1.0);
  const bool ok = r.report.max_rel_error < a.tol;
  std::printf("%s  max_rel_error %.3e  worst %s  params %zu  %.2f s\n", ok ? "PASS" : "FAIL",
              r.report.max_rel_error, r.worst_param.c_str(), r.parameters, r.seconds);
  if (!a.out.empty()) {
    const fs::path out(a.out);
    write_json(out / "gradcheck.json", {{"model", a.model},
                                        {"dims", a.dims},
                                        {"seed", a.seed},
                                        {"max_rel_error", r.report.max_rel_error},
                                        {"worst_param", r.worst_param},
                                        {"parameters", r.parameters},
                                        {"passed", ok}});
    prov.config = {{"model", a.model}, {"dims", a.dims}, {"seed", a.seed}, {"tolerance", a.tol}};
    prov.outputs = {(out / "gradcheck.json").string()};
    prov.write(out / "provenance.json");
  }
  return ok ? kOk : kCheckFailed;
}

struct AttnArgs {
  std::string checkpoint, utterance, manifest, out;
};

int cmd_attn_dump(const AttnArgs& a, Provenance prov) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const ModelConfig& mc = ck.model->config();
  if (mc.kind != ModelKind::cta && mc.kind != ModelKind::cta_nornn) {
    throw UsageError("attn-dump needs a CTA checkpoint, got " + std::string(model_kind_name(mc.kind)));
  }
  Manifest manifest;
  if (!a.manifest.empty()) {
    Manifest all = load_valid_manifest(a.manifest);
    manifest.root = all.root;
    for (const auto& r : all.records) {
      if (r.utterance_id == a.utterance) manifest.records.push_back(r);
    }
    if (manifest.records.empty()) throw UsageError("utterance '" + a.utterance + "' is not in the manifest");
  } else {
    ManifestRecord r;
    r.utterance_id = fs::path(a.utterance).stem().string();
    r.label = ck.info.train.classes.at(0);
    r.embeddings = fs::absolute(a.utterance);
    manifest.records.push_back(r);
  }
  KeyValueConfig shown;
  shown.set("checkpoint", a.checkpoint);
  shown.set("utterance", a.utterance);
  shown.set("seed", "none");
  print_config("attn-dump", shown);
  const Dataset data(manifest, mc, ck.info.train.classes);
  const std::vector<std::size_t> idx{0};
  const Batch batch = make_batch(data, idx);
  NoGradGuard guard;
  const ForwardResult r = ck.model->forward(batch, false, nullptr);
  const CtaAttentionOutput& att = *r.attention;
  const std::size_t n = mc.channels(), len = data[0].length();
  nlohmann::json heads = nlohmann::json::array();
  std::vector<double> mean_t(n, 0.0);
  for (std::size_t h = 0; h < att.alpha_t.size(); ++h) {
    const auto at = att.alpha_t[h].values();
    const auto ac = att.alpha_c[h].values();
    const auto full = att.a[h].values();
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t = 0; t < len; ++t) rows.push_back(std::vector<double>(full.begin() + t * n, full.begin() + (t + 1) * n));
    for (std::size_t c = 0; c < n; ++c) mean_t[c] += at[c] / static_cast<double>(att.alpha_t.size());
    heads.push_back({{"alpha_t", at}, {"alpha_c", std::vector<double>(ac.begin(), ac.begin() + len)}, {"a", rows}});
  }
  const auto probs = softmax(r.logits).values();
  const std::size_t pred = static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
  const auto blocks = mc.selected_blocks();
  const std::size_t argmax = attended_channels(att).at(0);
  nlohmann::json j = {{"utterance", data[0].id},
                      {"channels", n},
                      {"blocks", blocks},
                      {"steps", len},
                      {"heads", heads},
                      {"mean_alpha_t", mean_t},
                      {"argmax_channel", argmax},
                      {"argmax_block", blocks[argmax]},
                      {"probabilities", probs},
                      {"predicted", ck.info.train.classes.at(pred)}};
  if (!a.manifest.empty()) j["label"] = manifest.records[0].label;
  if (data[0].meta.contains("planted_channel")) j["planted_channel"] = data[0].meta["planted_channel"];
  const fs::path out(a.out);
  write_json(out / "attn.json", j);
  std::cout << "argmax channel " << argmax << ", wrote " << (out / "attn.json").string() << "\n";
  prov.inputs = {a.checkpoint, a.manifest.empty() ? a.utterance : a.manifest};
  prov.outputs = {(out / "attn.json").string()};
  prov.write(out / "provenance.json");
  return kOk;
}

struct BenchArgs {
  std::string n_list = "1,4,8,16";
  std::size_t m = 200, d = 64, heads = 8, head_dim = 64;
  int reps = 5;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_bench(const BenchArgs& a, Provenance prov) {
  const auto ns = parse_sizes(a.n_list, "--N-list");
  KeyValueConfig shown;
  shown.set("N_list", a.n_list);
  shown.set("m", std::to_string(a.m));
  shown.set("d", std::to_string(a.d));
  shown.set("heads", std::to_string(a.heads));
  shown.set("head_dim", std::to_string(a.head_dim));
  shown.set("reps", std::to_string(a.reps));
  shown.set("seed", std::to_string(a.seed));
  print_config("bench-attn", shown);
  const auto rows = bench_attention(ns, a.m, a.d, a.heads, a.head_dim, a.reps, a.seed);
  std::ostringstream tsv;
  tsv << "N\tm\td\tcta_ms\tflat_ms\tratio\n";
  for (const auto& r : rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%zu\t%zu\t%zu\t%.4f\t%.4f\t%.4f\n", r.channels, a.m, a.d, r.cta_ms, r.flat_ms,
                  r.ratio());
    tsv << line;
  }
  std::cout << tsv.str();
  if (!a.out.empty()) {
    const fs::path out(a.out);
    fs::create_directories(out);
    std::ofstream f(out / "bench.tsv");
    f << tsv.str();
    if (!f) throw IoError("cannot write " + (out / "bench.tsv").string());
    prov.config = {{"N_list", a.n_list}, {"m", a.m}, {"d", a.d}, {"heads", a.heads}, {"head_dim", a.head_dim},
                   {"reps", a.reps}, {"seed", a.seed}};
    prov.outputs = {(out / "bench.tsv").string()};
    prov.write(out / "provenance.json");
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctarnn: channel and temporal-wise attention models for speech emotion recognition"};
  app.require_subcommand(1);
  std::optional<std::size_t> threads_flag;
  app.add_option("--threads", threads_flag, "Worker threads (default: $CTARNN_THREADS or 1)")
      ->check(CLI::PositiveNumber);

  LmfbArgs lmfb;
  auto* c_lmfb = app.add_subcommand("lmfb", "Extract 80-dim log mel filterbank features from a 16 kHz wav");
  c_lmfb->add_option("--wav", lmfb.wav, "Input 16-bit mono 16 kHz wav")->required();
  c_lmfb->add_option("--out", lmfb.out, "Output SEQF file")->required();
  c_lmfb->add_flag("--normalize", lmfb.normalize, "Per-utterance mean/variance normalisation");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a planted-salience embedding corpus");
  c_synth->add_option("--spec", synth.spec, "key = value generator spec (defaults when omitted)");
  c_synth->add_option("--out-dir", synth.out_dir, "Output directory")->required();
  c_synth->add_option("--seed", synth.seed, "Override the spec seed");

  RunArgs cv;
  auto* c_cv = app.add_subcommand("cv", "Leave-one-speaker-out cross-validation");
  RunArgs train;
  auto* c_train = app.add_subcommand("train", "Train one model with a held-out validation speaker");
  for (auto [cmd, args] : {std::pair{c_cv, &cv}, std::pair{c_train, &train}}) {
    cmd->add_option("--config", args->config, "Run config (model and training keys)")->required();
    cmd->add_option("--manifest", args->manifest, "Utterance manifest (JSONL)")->required();
    cmd->add_option("--manifest2", args->manifest2, "Second manifest paired by utterance id");
    cmd->add_option("--stream2", args->stream2, "Stream taken from --manifest2");
    cmd->add_option("--out", args->out, "Output directory")->required();
    cmd->add_option("--seed", args->seed, "Override the config seed");
  }
  c_train->add_option("--val-speaker", train.val_speaker, "Validation speaker (default: last by id)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate trained checkpoints on a whole corpus");
  c_eval->add_option("--checkpoints", ev.checkpoints, "Checkpoint directory or a directory of them")->required();
  c_eval->add_option("--manifest", ev.manifest, "Evaluation manifest")->required();
  c_eval->add_option("--manifest2", ev.manifest2, "Second manifest paired by utterance id");
  c_eval->add_option("--stream2", ev.stream2, "Stream taken from --manifest2");
  c_eval->add_option("--out", ev.out, "Output directory")->required();
  c_eval->add_option("--batch-size", ev.batch_size, "Evaluation batch size")->check(CLI::PositiveNumber);

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  c_gc->add_option("--model", gc.model, "rnn, wf, ef, lf, cta or cta_nornn");
  c_gc->add_option("--dims", gc.dims, "N,m,d_e,d_h,heads,d_alpha,classes");
  c_gc->add_option("--seed", gc.seed, "Parameter and input seed");
  c_gc->add_option("--tol", gc.tol, "Maximum relative error");
  c_gc->add_option("--out", gc.out, "Optional output directory for gradcheck.json");
  c_gc->add_option("--corrupt-adjoint", gc.corrupt)->group("");

  AttnArgs at;
  auto* c_at = app.add_subcommand("attn-dump", "Dump the attention of a CTA checkpoint for one utterance");
  c_at->add_option("--checkpoint", at.checkpoint, "Checkpoint directory")->required();
  c_at->add_option("--utterance", at.utterance, "Utterance id (with --manifest) or embeddings SEQF file")->required();
  c_at->add_option("--manifest", at.manifest, "Manifest to look the utterance up in");
  c_at->add_option("--out", at.out, "Output directory")->required();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench-attn", "Time CTA against flat global attention");
  c_bench->add_option("--N-list", bench.n_list, "Channel counts, comma separated");
  c_bench->add_option("--m", bench.m, "Time steps")->check(CLI::PositiveNumber);
  c_bench->add_option("--d", bench.d, "Feature dim")->check(CLI::PositiveNumber);
  c_bench->add_option("--heads", bench.heads, "Attention heads")->check(CLI::PositiveNumber);
  c_bench->add_option("--head-dim", bench.head_dim, "Per-head dim")->check(CLI::PositiveNumber);
  c_bench->add_option("--reps", bench.reps, "Repetitions (best is kept)")->check(CLI::PositiveNumber);
  c_bench->add_option("--seed", bench.seed, "Input seed");
  c_bench->add_option("--out", bench.out, "Output directory for bench.tsv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  Provenance prov;
  prov.argv.assign(argv, argv + argc);
  try {
    const std::size_t threads = threads_flag ? *threads_flag : default_threads();
    std::cout << "# threads " << threads << "\n";
    if (c_lmfb->parsed()) return prov.command = "lmfb", cmd_lmfb(lmfb, prov);
    if (c_synth->parsed()) return prov.command = "synth", cmd_synth(synth, prov);
    if (c_cv->parsed()) return prov.command = "cv", cmd_cv(cv, threads, prov);
    if (c_train->parsed()) return prov.command = "train", cmd_train(train, prov);
    if (c_eval->parsed()) return prov.command = "eval", cmd_eval(ev, prov);
    if (c_gc->parsed()) return prov.command = "gradcheck", cmd_gradcheck(gc, prov);
    if (c_at->parsed()) return prov.command = "attn-dump", cmd_attn_dump(at, prov);
    if (c_bench->parsed()) return prov.command = "bench-attn", cmd_bench(bench, prov);
  } catch (const CheckFailure& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const ManifestParseError& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return kIo;
  } catch (const ManifestMismatchError& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
